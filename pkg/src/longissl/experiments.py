"""Synthetic end-to-end experiment: phantom cohort, pre-training, fine-tuning, baselines."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cohort import classification_task, split_pools
from .config import RunConfig, apply_overrides, desk_config
from .data import Split
from .evaluation import run_trials
from .synth import PhantomSpec, generate_cohort, verify_cohort
from .trainer import VolumeStore, pretext_accuracy, pretrain

log = logging.getLogger(__name__)


@dataclass
class EndToEndPlan:
    """Budgets for the desk-scale run (about 25 minutes on one CPU core)."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 30
    trial_seeds: tuple[int, ...] = (0, 1, 2)
    # TOPC vs supervised single-image comparison, one mean AUC per triplet
    seed_triplets: tuple[tuple[int, int, int], ...] = ((10, 11, 12), (20, 21, 22), (30, 31, 32))
    seed: int = 0

    def config(self, method: str) -> RunConfig:
        return apply_overrides(
            desk_config(),
            {
                "method": method,
                "seed": self.seed,
                "pretrain.epochs": self.pretrain_epochs,
                "pretrain.lr": self.pretrain_lr,
                "finetune.epochs": self.finetune_epochs,
            },
        )


def run_end_to_end(out_dir: str | Path, plan: EndToEndPlan | None = None) -> dict:
    """Run every stage and return (and save) a flat results dict.

    Keys: ``top_pair_acc``, ``top_quad_acc``, ``classification_auc`` (k -> mean test AUC of
    TOP fine-tuning), ``topc_vs_supervised`` (one record per seed triplet), ``seconds``.
    """
    plan = plan or EndToEndPlan()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    results: dict = {"plan": asdict(plan)}

    cohort = generate_cohort(plan.phantom, out / "cohort")
    check = verify_cohort(cohort.manifest, plan.phantom.resolution)
    if not check["ok"]:
        raise RuntimeError(f"phantom verification failed: {check['findings'][:3]}")
    pools = split_pools(cohort.manifest)
    store = VolumeStore.for_manifest(cohort.manifest, plan.phantom.resolution)
    results["sequence_counts"] = {sp.value: pools[sp].report["counts"] for sp in Split}

    top_cfg = plan.config("TOP")
    top = pretrain(top_cfg, pools[Split.TRAIN], store, val_pool=pools[Split.VAL], out_dir=out / "pretrain_top")
    results["top_pair_acc"] = pretext_accuracy(top.model, pools[Split.TEST], store, 2)
    results["top_triplet_acc"] = pretext_accuracy(top.model, pools[Split.TEST], store, 3)
    results["top_quad_acc"] = pretext_accuracy(top.model, pools[Split.TEST], store, 4)
    log.info("TOP pretext accuracy: %s", {k: results[k] for k in ("top_pair_acc", "top_triplet_acc", "top_quad_acc")})

    results["classification_auc"] = {}
    for k in (1, 2, 3):
        task = classification_task(pools, k)
        rep = run_trials(top_cfg, task, len(plan.trial_seeds), store, checkpoint=top, seeds=list(plan.trial_seeds), out_dir=out / f"finetune_top_{k}img")
        results["classification_auc"][k] = rep.mean
        log.info("TOP fine-tuned, %d image(s): %s", k, rep.aucs)

    topc_cfg = plan.config("TOPC")
    topc = pretrain(topc_cfg, pools[Split.TRAIN], store, val_pool=pools[Split.VAL], out_dir=out / "pretrain_topc")
    single = classification_task(pools, 1)
    comparisons = []
    for i, seeds in enumerate(plan.seed_triplets):
        row = {"seeds": list(seeds)}
        for method, cfg, ckpt in (("TOPC", topc_cfg, topc), ("SUPERVISED", plan.config("SUPERVISED"), None)):
            rep = run_trials(cfg, single, len(seeds), store, checkpoint=ckpt, seeds=list(seeds), out_dir=out / f"single_{method.lower()}_{i}")
            row[method] = rep.mean
            row[f"{method}_aucs"] = rep.aucs
        log.info("single-image triplet %d: %s", i, row)
        comparisons.append(row)
    results["topc_vs_supervised"] = comparisons
    results["seconds"] = time.time() - t0
    (out / "results.json").write_text(json.dumps(results, indent=2, default=str))
    return results
