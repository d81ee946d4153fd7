"""Repeated-trial evaluation and reports."""

from __future__ import annotations

import copy
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import TaskSplits
from .metrics import UndefinedMetricError, auc_binary, auc_macro_ovr  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass
class TrialReport:
    task: str
    method: str
    aucs: list[float]
    seeds: list[int]
    failed: list[dict] = field(default_factory=list)
    val_aucs: list[float] = field(default_factory=list)

    @property
    def num_trials(self) -> int:
        return len(self.seeds)

    @property
    def completed(self) -> int:
        return len(self.aucs)

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs)) if self.aucs else float("nan")

    @property
    def std(self) -> float:
        """Population standard deviation across completed trials (0 for one trial)."""
        return float(np.std(self.aucs)) if self.aucs else float("nan")

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, std=self.std, num_trials=self.num_trials, partial=self.partial)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def format_table(reports: list[TrialReport]) -> str:
    """Rows are tasks, columns methods, cells ``mean±std``."""
    methods = list(dict.fromkeys(r.method for r in reports))
    tasks = list(dict.fromkeys(r.task for r in reports))
    cell = {(r.task, r.method): f"{r.mean:.3f}±{r.std:.3f}" + ("*" if r.partial else "") for r in reports}
    width = max([len("Task")] + [len(t) for t in tasks]) + 2
    lines = ["Task".ljust(width) + "".join(m.rjust(16) for m in methods)]
    lines.append("-" * len(lines[0]))
    for t in tasks:
        lines.append(t.ljust(width) + "".join(cell.get((t, m), "-").rjust(16) for m in methods))
    if any(r.partial for r in reports):
        lines.append("* some trials failed; aggregated over completed trials")
    return "\n".join(lines)


def run_trials(
    config: RunConfig,
    task: TaskSplits,
    num_trials: int,
    store,
    checkpoint=None,
    seeds: list[int] | None = None,
    out_dir: str | Path | None = None,
) -> TrialReport:
    """Train (``SUPERVISED``) or fine-tune ``checkpoint`` once per seed and score each on TEST."""
    from .trainer import evaluate, finetune, train_supervised

    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(num_trials)]
    if len(seeds) != num_trials or len(set(seeds)) != num_trials:
        raise ValueError("need one distinct seed per trial")
    report = TrialReport(task.name, config.method, [], seeds)
    for i, seed in enumerate(seeds):
        cfg = copy.deepcopy(config)
        cfg.seed = seed
        trial_dir = Path(out_dir) / f"trial_{i}_seed_{seed}" if out_dir else None
        try:
            if cfg.method == "SUPERVISED":
                result = train_supervised(task, cfg, store, out_dir=trial_dir)
            else:
                result = finetune(checkpoint, task, cfg, store, out_dir=trial_dir)
            report.aucs.append(evaluate(result.model, task.test, store)["auc"])
            report.val_aucs.append(result.best_metric)
        except Exception as exc:  # a failed trial is recorded, not fatal
            log.error("trial %d (seed %d) failed: %s", i, seed, exc)
            report.failed.append({"trial": i, "seed": seed, "error": repr(exc), "traceback": traceback.format_exc()})
    if out_dir:
        report.save(Path(out_dir) / "report.json")
        (Path(out_dir) / "report.txt").write_text(format_table([report]) + "\n")
    return report
