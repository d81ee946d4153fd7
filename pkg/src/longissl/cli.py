"""Command-line entry point.

Every verb takes ``--config`` (YAML) plus any number of ``--set key.path=value``
overrides and writes its artifacts to ``<run root>/<timestamp>-<config hash>``.
The run root is ``$LONGISSL_RUN_ROOT`` when set, else ``run_root`` from the config.

Exit codes: 0 success, 1 configuration or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config
from .data import Split, TaskKind, read_manifest

log = logging.getLogger("longissl")

RUN_ROOT_ENV = "LONGISSL_RUN_ROOT"


class CliError(Exception):
    """Reported on stderr with exit code 1."""


def run_dir(config: RunConfig, verb: str) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV) or config.run_root)
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = root / f"{stamp}-{config.hash()}"
    path.mkdir(parents=True, exist_ok=False)
    config.save(path / "config.yaml")
    (path / "command.json").write_text(json.dumps({"verb": verb, "argv": sys.argv[1:]}, indent=2))
    return path


def _load_data(config: RunConfig):
    from .cohort import split_pools
    from .trainer import VolumeStore

    if not config.data.manifest:
        raise CliError("data.manifest: required for this command")
    manifest, rejected = read_manifest(config.data.manifest, config.data.splits)
    if rejected:
        log.warning("%d manifest rows rejected", len(rejected))
    if not manifest.split_assignment:
        raise CliError("data.splits: a split file is required for training")
    d = config.data
    pools = split_pools(manifest, d.min_gap, d.max_gap, d.max_len)
    store = VolumeStore.for_manifest(manifest, config.resolution, d.norm_mode)
    return manifest, pools, store


def _task(config: RunConfig, pools):
    from .cohort import classification_task, conversion_task

    t = config.task
    try:
        kind = TaskKind(t.kind)
    except ValueError:
        raise CliError(f"task.kind: unknown task {t.kind!r}") from None
    if kind is TaskKind.STABLE_CLASSIFICATION:
        return classification_task(pools, t.num_images)
    return conversion_task(pools, t.from_label, t.to_label, predict=kind is TaskKind.FUTURE_CONVERSION)


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def cmd_synth(config: RunConfig, args, out: Path) -> dict:
    from .synth import generate_cohort, verify_cohort

    spec = config.phantom
    if tuple(spec.resolution) != tuple(config.resolution):
        raise CliError(f"phantom.resolution: {spec.resolution} differs from resolution {config.resolution}")
    target = Path(args.out) if args.out else out / "cohort"
    cohort = generate_cohort(spec, target)
    report = verify_cohort(cohort.manifest, config.resolution)
    (out / "verify.json").write_text(json.dumps(report, indent=2))
    if not report["ok"]:
        raise CliError(f"phantom verification failed: {len(report['findings'])} findings (see {out / 'verify.json'})")
    return {"manifest": str(cohort.manifest_path), "splits": str(cohort.splits_path), "records": report["num_records"]}


def cmd_extract(config: RunConfig, args, out: Path) -> dict:
    from .cohort import extract_sequences, write_report

    manifest, rejected = read_manifest(config.data.manifest, config.data.splits) if config.data.manifest else (None, None)
    if manifest is None:
        raise CliError("data.manifest: required for this command")
    d = config.data
    splits = [None] if not manifest.split_assignment else list(Split)
    summary = {"rejected_rows": len(rejected)}
    for sp in splits:
        pool = extract_sequences(manifest, sp, d.min_gap, d.max_gap, d.max_len)
        name = sp.value if sp else "ALL"
        write_report(out / f"sequences_{name}.json", pool.report)
        summary[name] = pool.report["counts"]
    return summary


def cmd_pretrain(config: RunConfig, args, out: Path) -> dict:
    from .trainer import pretext_accuracy, pretrain

    _, pools, store = _load_data(config)
    result = pretrain(config, pools[Split.TRAIN], store, val_pool=pools[Split.VAL], out_dir=out)
    acc = {}
    for n in pools[Split.TEST].available_lengths():
        if config.method != "TOV" or n == 2:
            acc[str(n)] = pretext_accuracy(result.model, pools[Split.TEST], store, n, config.method)
    return {"best": str(result.best_path), "last": str(result.last_path), "best_val_pretext_acc": result.best_metric, "test_pretext_acc": acc}


def cmd_finetune(config: RunConfig, args, out: Path) -> dict:
    from .trainer import evaluate, finetune

    if not args.checkpoint:
        raise CliError("--checkpoint: required for finetune")
    _, pools, store = _load_data(config)
    task = _task(config, pools)
    result = finetune(args.checkpoint, task, config, store, out_dir=out)
    return {"task": task.name, "best": str(result.best_path), "val_auc": result.best_metric, "test": evaluate(result.model, task.test, store)}


def cmd_supervised(config: RunConfig, args, out: Path) -> dict:
    from .trainer import evaluate, train_supervised

    _, pools, store = _load_data(config)
    task = _task(config, pools)
    result = train_supervised(task, config, store, out_dir=out)
    return {"task": task.name, "best": str(result.best_path), "val_auc": result.best_metric, "test": evaluate(result.model, task.test, store)}


def cmd_evaluate(config: RunConfig, args, out: Path) -> dict:
    from .nets import load_checkpoint
    from .trainer import evaluate

    if not args.checkpoint:
        raise CliError("--checkpoint: required for evaluate")
    model, meta = load_checkpoint(args.checkpoint)
    if meta.kind != "downstream":
        raise CliError(f"--checkpoint: expected a downstream checkpoint, got {meta.kind}")
    _, pools, store = _load_data(config)
    task = _task(config, pools)
    if task.num_input_images != meta.extra["num_images"]:
        raise CliError(f"task.num_images: checkpoint was trained on {meta.extra['num_images']} images")
    return {"task": task.name, "split": args.split, "metrics": evaluate(model, getattr(task, args.split.lower()), store)}


def cmd_trials(config: RunConfig, args, out: Path) -> dict:
    from .evaluation import format_table, run_trials

    if config.method != "SUPERVISED" and not args.checkpoint:
        raise CliError("--checkpoint: required unless method is SUPERVISED")
    num = args.num or config.num_trials
    _, pools, store = _load_data(config)
    task = _task(config, pools)
    report = run_trials(config, task, num, store, checkpoint=args.checkpoint, out_dir=out)
    print(format_table([report]))
    if not report.aucs:
        raise CliError(f"all {num} trials failed: {report.failed[0]['error']}")
    return report.to_dict() | {"failed": len(report.failed)}


VERBS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "supervised": cmd_supervised,
    "evaluate": cmd_evaluate,
    "trials": cmd_trials,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longissl", description="Spatiotemporal self-supervised pre-training on longitudinal volumes.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    verb("synth", "generate and verify the synthetic phantom cohort").add_argument("--out", help="cohort directory (default: <run dir>/cohort)")
    verb("extract", "extract gap-constrained sequences and write per-split reports")
    verb("pretrain", "self-supervised pre-training").add_argument("--method", required=True, type=str.upper, choices=["TOV", "TOP", "TOPC"])
    verb("finetune", "fine-tune a pre-trained checkpoint on config.task").add_argument("--checkpoint")
    verb("supervised", "train the randomly initialised baseline on config.task")
    ev = verb("evaluate", "score a downstream checkpoint")
    ev.add_argument("--checkpoint")
    ev.add_argument("--split", default="TEST", type=str.upper, choices=[s.value for s in Split])
    tr = verb("trials", "repeated fine-tuning (or supervised) trials with mean/std AUC")
    tr.add_argument("--checkpoint")
    tr.add_argument("--num", type=int, help="number of trials (default: config num_trials)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        if args.verb == "pretrain":
            config = apply_overrides(config, {"method": args.method})
        elif args.verb == "supervised":
            config = apply_overrides(config, {"method": "SUPERVISED"})
        elif args.verb == "trials" and args.num is not None and args.num < 1:
            raise CliError("--num: must be >= 1")
        out = run_dir(config, args.verb)
        summary = VERBS[args.verb](config, args, out)
    except (CliError, ValueError, FileNotFoundError) as exc:
        # ConfigError, ValidationError and DegenerateTaskError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {"run_dir": str(out), **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
