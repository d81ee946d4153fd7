"""Pre-training loops (order verification, order prediction, order prediction +
contrastive), downstream fine-tuning and the supervised baseline."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from . import objectives
from .augment import NormMode, NormStats, downstream_augment_sequence, make_two_views, normalize, pretrain_augment
from .cohort import ANY, SequencePool, sample_epoch, sample_task_epoch
from .config import RunConfig
from .data import (
    Manifest,
    ScanRecord,
    Sequence,
    Split,
    TaskDataset,
    TaskSplits,
    ValidationError,
    all_permutations,
    apply_permutation,
    index_to_permutation,
    load_volume,
)
from .metrics import auc_binary, auc_macro_ovr
from .nets import (
    TOV_LENGTH,
    CheckpointMeta,
    ConfigError,
    DownstreamModel,
    SSLModel,
    build_downstream,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class DegenerateTaskError(ValueError):
    """A task partition lacks a class; training refuses it."""


# --------------------------------------------------------------------------
# Volume access
# --------------------------------------------------------------------------


class VolumeStore:
    """Loads, checks and normalises volumes on first use, then caches them."""

    def __init__(self, resolution, stats: NormStats | None = None, mode: NormMode | str = NormMode.ZSCORE, loader: Callable | None = None):
        self.resolution = tuple(resolution)
        self.stats = stats
        self.mode = NormMode(mode)
        self._loader = loader or (lambda rec: load_volume(rec.volume_path))
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @classmethod
    def for_manifest(cls, manifest: Manifest, resolution, mode=NormMode.ZSCORE, loader=None) -> "VolumeStore":
        """Statistics come from TRAIN-split scans only (all scans if there is no split)."""
        store = cls(resolution, None, mode, loader)
        train = [r for r in manifest.records if manifest.split_assignment.get(r.patient_id, Split.TRAIN) == Split.TRAIN]
        store.stats = NormStats.from_volumes([store.raw(r) for r in train])
        return store

    def raw(self, rec: ScanRecord) -> np.ndarray:
        vol = self._loader(rec)
        vol.check_resolution(self.resolution)
        return vol.data

    def get(self, rec: ScanRecord) -> np.ndarray:
        arr = self._cache.get(rec.key)
        if arr is None:
            arr = self.raw(rec)
            if self.stats is not None:
                arr = normalize(arr, self.stats, self.mode)
            arr.flags.writeable = False
            self._cache[rec.key] = arr
        return arr

    def sequence(self, scans: Iterable[ScanRecord]) -> list[np.ndarray]:
        return [self.get(r) for r in scans]


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def make_optimizer(name: str, groups, weight_decay: float = 0.0) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(groups, weight_decay=weight_decay)
    if name == "adamw":
        return torch.optim.AdamW(groups, weight_decay=weight_decay)
    if name == "sgd":
        return torch.optim.SGD(groups, momentum=0.9, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


def batches(items: list, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _to_tensor(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays), dtype=np.float32))


class JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


@dataclass
class TrainResult:
    """What a training run hands back: the selected model and where it was saved."""

    model: nn.Module
    meta: CheckpointMeta
    best_path: Path | None = None
    last_path: Path | None = None
    history: list[dict] = field(default_factory=list)
    best_metric: float = float("nan")


# --------------------------------------------------------------------------
# Pretext batch construction
# --------------------------------------------------------------------------


def draw_tov_order(n: int, rng: np.random.Generator) -> tuple[tuple[int, ...], int]:
    """Balanced: identity (label 1) with probability 0.5, else a uniform non-identity permutation (label 0)."""
    if rng.random() < 0.5:
        return tuple(range(n)), 1
    idx = int(rng.integers(1, math.factorial(n)))  # class 0 is the identity
    return index_to_permutation(n, idx), 0


def tov_sample(arrays: list[np.ndarray], rng: np.random.Generator, length: int = TOV_LENGTH):
    """Permute, then append zero volumes up to ``length``. Returns (stack, label, order)."""
    order, y = draw_tov_order(len(arrays), rng)
    permuted = apply_permutation(arrays, order)
    pad = [np.zeros_like(arrays[0])] * (length - len(arrays))
    return np.stack(permuted + pad), y, order


def top_sample(arrays: list[np.ndarray], rng: np.random.Generator):
    n = len(arrays)
    cls = int(rng.integers(math.factorial(n)))
    order = index_to_permutation(n, cls)
    return np.stack(apply_permutation(arrays, order)), cls, order


def draw_epoch_length(pool: SequencePool, rng: np.random.Generator, max_tries: int = 100) -> int:
    """Uniform over {2, 3, 4}, redrawn while the pool has no sequence of that length."""
    available = set(pool.available_lengths())
    if not available:
        raise ValidationError("sequence pool is empty")
    for _ in range(max_tries):
        n = int(rng.integers(2, 5))
        if n in available:
            return n
    return min(available)


# --------------------------------------------------------------------------
# Pretext evaluation
# --------------------------------------------------------------------------


@torch.no_grad()
def encode_records(encoder: nn.Module, records: list[ScanRecord], store: VolumeStore, batch_size: int = 32) -> dict:
    encoder.eval()
    out = {}
    for chunk in batches(records, batch_size):
        feats = encoder(_to_tensor(store.sequence(chunk)).unsqueeze(1))
        out.update({r.key: f for r, f in zip(chunk, feats)})
    return out


def _unique(seqs: list[Sequence]) -> list[ScanRecord]:
    seen, out = set(), []
    for s in seqs:
        for r in s.scans:
            if r.key not in seen:
                seen.add(r.key)
                out.append(r)
    return out


@torch.no_grad()
def pretext_accuracy(model: SSLModel, pool: SequencePool, store: VolumeStore, n: int, method: str = "TOP") -> float:
    """Exhaustive accuracy over every sequence of length ``n`` under every permutation.

    For order verification the identity and non-identity cases are weighted
    equally (the balanced training distribution).
    """
    seqs = pool.sequences(n)
    if not seqs:
        return float("nan")
    model.eval()
    feats = encode_records(model.encoder, _unique(seqs), store)
    perms = all_permutations(n)
    correct, total = 0.0, 0
    if method == "TOV":
        shape = store.get(seqs[0].scans[0]).shape
        pad = model.encoder(torch.zeros(1, 1, *shape))[0]
    for s in seqs:
        f = torch.stack([feats[r.key] for r in s.scans])
        stacked = torch.stack([f[list(p)] for p in perms])  # (n!, n, d)
        if method == "TOV":
            padded = torch.cat([stacked, pad.expand(len(perms), TOV_LENGTH - n, -1)], dim=1)
            pred = (model.tov_logits(padded) > 0).long()
            truth = torch.tensor([1] + [0] * (len(perms) - 1))
            hit = (pred == truth).float()
            correct += 0.5 * hit[0].item() + 0.5 * hit[1:].mean().item()
            total += 1
        else:
            pred = model.top_forward(stacked, n).argmax(1)
            correct += (pred == torch.arange(len(perms))).sum().item()
            total += len(perms)
    return correct / total


def validation_metric(model: SSLModel, pool: SequencePool | None, store: VolumeStore, method: str) -> float:
    if pool is None:
        return float("nan")
    accs = [pretext_accuracy(model, pool, store, n, "TOV" if method == "TOV" else "TOP") for n in pool.available_lengths()]
    accs = [a for a in accs if not math.isnan(a)]
    return float(np.mean(accs)) if accs else float("nan")


# --------------------------------------------------------------------------
# Pre-training
# --------------------------------------------------------------------------


def _pretrain_meta(config: RunConfig, method: str, epoch: int, model: SSLModel) -> CheckpointMeta:
    extra = {"hidden": list(model.hidden), "projection_dim": model.projection[-1].out_features, "input_shape": list(config.resolution)}
    return CheckpointMeta(method, "pretrain", asdict(config.encoder), epoch, config.hash(), extra)


def _tov_step(model, seqs, store, config, rng):
    samples = [tov_sample(pretrain_augment(store.sequence(s.scans), config.pretrain.augment, rng), rng) for s in seqs]
    x = _to_tensor([s[0] for s in samples])
    y = torch.tensor([s[1] for s in samples], dtype=torch.float32)
    prob = model.tov_forward(model.encode_sequences(x))
    loss = objectives.bce_loss(y, prob, config.pretrain.eps)
    return loss, {"bce": loss.item()}


def _top_step(model, seqs, store, config, rng):
    n = len(seqs[0])
    samples = [top_sample(pretrain_augment(store.sequence(s.scans), config.pretrain.augment, rng), rng) for s in seqs]
    x = _to_tensor([s[0] for s in samples])
    target = torch.tensor([s[1] for s in samples])
    loss = objectives.perm_ce_loss(model.top_forward(model.encode_sequences(x), n), target)
    return loss, {"perm_ce": loss.item()}


def _topc_step(model, seqs, store, config, rng):
    n = len(seqs[0])
    pc = config.pretrain
    views_i, views_j = zip(*(make_two_views(store.sequence(s.scans), pc.augment, rng) for s in seqs))
    x = _to_tensor([np.stack(v) for v in views_i + views_j])  # (2B, n, D, H, W)
    feats = model.encode_sequences(x)
    b = len(seqs)
    h_i, h_j = feats[:b], feats[b:]
    stats = {}
    if b >= 2:
        # contrastive term on the chronologically first scan only
        contrastive = objectives.ntxent_loss(model.project(h_i[:, 0]), model.project(h_j[:, 0]), pc.temperature, pc.negatives)
        stats["ntxent"] = contrastive.item()
    else:
        warnings.warn("batch of one sequence: contrastive term skipped", RuntimeWarning)
        contrastive = h_i.new_zeros(())
    # permute view-i representations; no re-encoding
    classes = [int(rng.integers(math.factorial(n))) for _ in range(b)]
    order = torch.tensor([index_to_permutation(n, c) for c in classes])
    permuted = torch.gather(h_i, 1, order[:, :, None].expand(-1, -1, h_i.shape[2]))
    ce = objectives.perm_ce_loss(model.top_forward(permuted, n), torch.tensor(classes))
    stats["perm_ce"] = ce.item()
    loss = objectives.topc_loss(contrastive, ce, pc.contrastive_weight, pc.order_weight)
    return loss, stats


_STEPS = {"TOV": _tov_step, "TOP": _top_step, "TOPC": _topc_step}


def plan_epoch(method: str, pool: SequencePool, seed: int, epoch: int) -> tuple[int | None, list[Sequence]]:
    """The epoch's sequence length (None = any) and its shuffled one-per-patient sample."""
    rng = epoch_rng(seed, epoch, 0)
    n = ANY if method == "TOV" else draw_epoch_length(pool, rng)
    seqs = sample_epoch(pool, n, epoch_seed(seed, epoch))
    return n, [seqs[i] for i in rng.permutation(len(seqs))]


def pretrain(
    config: RunConfig,
    pool: SequencePool,
    store: VolumeStore,
    val_pool: SequencePool | None = None,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    model: SSLModel | None = None,
) -> TrainResult:
    """Generic pre-training loop; ``config.method`` picks TOV, TOP or TOPC.

    Each epoch samples one sequence per patient. TOP/TOPC epochs use a single
    randomly drawn length so only one permutation head is active. A checkpoint
    is written every epoch, plus ``best.pt`` whenever the validation pretext
    accuracy improves.
    """
    method = config.method
    if method not in _STEPS:
        raise ConfigError(f"pretrain: method must be TOV, TOP or TOPC, got {method}")
    if not len(pool):
        raise ValidationError("pretrain: empty sequence pool")
    seed_everything(config.seed)
    if model is None:
        model = SSLModel(config.encoder, config.hidden)
    pc = config.pretrain
    opt = make_optimizer(pc.optimizer, [{"params": model.parameters(), "lr": pc.lr}], pc.weight_decay)
    out = Path(out_dir) if out_dir else None
    logger = JsonlLog(out / "log.jsonl" if out else None)
    step_fn = _STEPS[method]
    best, best_state, best_path, last_path, steps = -math.inf, None, None, None, 0
    for epoch in range(pc.epochs):
        n, seqs = plan_epoch(method, pool, config.seed, epoch)
        if not seqs:
            warnings.warn(f"epoch {epoch}: no sequences sampled, skipped", RuntimeWarning)
            continue
        rng = epoch_rng(config.seed, epoch, 1)
        model.train()
        losses: dict[str, list[float]] = {}
        for batch in batches(seqs, pc.batch_size):
            loss, stats = step_fn(model, batch, store, config, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in {"loss": loss.item(), **stats}.items():
                losses.setdefault(k, []).append(v)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        val = validation_metric(model, val_pool, store, method)
        row = {"epoch": epoch, "n": n, "num_sequences": len(seqs), **{k: float(np.mean(v)) for k, v in losses.items()}, "val_pretext_acc": val}
        logger.write(row)
        log.info("pretrain %s epoch %d %s", method, epoch, row)
        meta = _pretrain_meta(config, method, epoch, model)
        if out:
            last_path = save_checkpoint(out / "last.pt", model, meta)
        score = val if not math.isnan(val) else -row["loss"]
        if score > best:
            best, best_state = score, copy.deepcopy(model.state_dict())
            if out:
                best_path = save_checkpoint(out / "best.pt", model, meta)
        if max_steps is not None and steps >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    meta = read_meta_or(best_path, _pretrain_meta(config, method, -1, model))
    return TrainResult(model, meta, best_path, last_path, logger.rows, best)


def read_meta_or(path, default: CheckpointMeta) -> CheckpointMeta:
    if path is None:
        return default
    return CheckpointMeta(**json.loads(Path(path).with_suffix(".json").read_text()))


def pretrain_tov(config: RunConfig, pool, store, **kw) -> TrainResult:
    return pretrain(_with_method(config, "TOV"), pool, store, **kw)


def pretrain_top(config: RunConfig, pool, store, **kw) -> TrainResult:
    return pretrain(_with_method(config, "TOP"), pool, store, **kw)


def pretrain_topc(config: RunConfig, pool, store, **kw) -> TrainResult:
    return pretrain(_with_method(config, "TOPC"), pool, store, **kw)


def _with_method(config: RunConfig, method: str) -> RunConfig:
    cfg = copy.deepcopy(config)
    cfg.method = method
    return cfg


# --------------------------------------------------------------------------
# Downstream
# --------------------------------------------------------------------------


def _sample_tensors(samples, store: VolumeStore, rng: np.random.Generator | None, augment) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    vols, gaps = [], []
    for s in samples:
        arrays = store.sequence(s.scans)
        if rng is not None:
            arrays = downstream_augment_sequence(arrays, augment, rng)
        vols.append(np.stack(arrays))
        gaps.append(s.gaps_years)
    x = _to_tensor(vols)
    g = torch.tensor(gaps, dtype=torch.float32) if x.shape[1] > 1 else torch.zeros(len(samples), 0)
    y = torch.tensor([s.label for s in samples])
    return x, g, y


@torch.no_grad()
def predict(model: DownstreamModel, dataset: TaskDataset, store: VolumeStore, batch_size: int = 32) -> np.ndarray:
    """Class probabilities for every sample, un-augmented."""
    model.eval()
    probs = []
    for chunk in batches(list(dataset.samples), batch_size):
        x, g, _ = _sample_tensors(chunk, store, None, None)
        probs.append(torch.softmax(model(x, g if g.numel() else None), dim=1).numpy())
    return np.concatenate(probs) if probs else np.zeros((0, dataset.num_classes))


def task_auc(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    if num_classes == 2:
        return auc_binary(probs[:, 1], labels)
    return auc_macro_ovr(probs, labels)


def evaluate(model: DownstreamModel, dataset: TaskDataset, store: VolumeStore) -> dict:
    probs = predict(model, dataset, store)
    labels = dataset.labels()
    return {"auc": task_auc(probs, labels, dataset.num_classes), "num_samples": len(labels), "num_patients": len(dataset.patients())}


def _check_task(task: TaskSplits) -> None:
    if task.num_classes < 2:
        raise ConfigError("downstream task needs at least two classes")
    for name in ("train", "val"):
        part = getattr(task, name)
        if part.degenerate:
            raise DegenerateTaskError(f"{task.name}: {name} partition lacks a class ({part.info})")


def _downstream_meta(config: RunConfig, source_method: str, task: TaskSplits, epoch: int, model: DownstreamModel) -> CheckpointMeta:
    extra = {
        "source_method": source_method,
        "num_images": task.num_input_images,
        "num_classes": task.num_classes,
        "class_names": list(task.class_names),
        "task": task.name,
        "hidden": list(config.hidden),
        "input_shape": list(config.resolution),
    }
    return CheckpointMeta("SUPERVISED" if source_method == "SUPERVISED" else source_method, "downstream", asdict(config.encoder), epoch, config.hash(), extra)


def train_downstream(
    model: DownstreamModel,
    source_method: str,
    task: TaskSplits,
    config: RunConfig,
    store: VolumeStore,
    param_groups: list[dict],
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Shared loop for fine-tuning and supervised training.

    One sample per patient per epoch; best validation AUC selects the model.
    """
    _check_task(task)
    fc = config.finetune
    opt = make_optimizer(fc.optimizer, param_groups, fc.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    out = Path(out_dir) if out_dir else None
    logger = JsonlLog(out / "log.jsonl" if out else None)
    best, best_state, best_path, steps = -math.inf, None, None, 0
    for epoch in range(fc.epochs):
        samples = sample_task_epoch(task.train, epoch_seed(config.seed, epoch))
        rng = epoch_rng(config.seed, epoch, 2)
        samples = [samples[i] for i in rng.permutation(len(samples))]
        model.train()
        losses = []
        for chunk in batches(samples, fc.batch_size):
            if len(chunk) < 2 and any(isinstance(m, nn.BatchNorm3d) for m in model.modules()):
                continue  # batch norm cannot train on a single sample
            x, g, y = _sample_tensors(chunk, store, rng, fc.augment)
            loss = loss_fn(model(x, g if g.numel() else None), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        val_auc = evaluate(model, task.val, store)["auc"]
        row = {"epoch": epoch, "num_samples": len(samples), "loss": float(np.mean(losses)) if losses else float("nan"), "val_auc": val_auc}
        logger.write(row)
        log.info("%s %s epoch %d %s", source_method, task.name, epoch, row)
        if val_auc > best:
            best, best_state = val_auc, copy.deepcopy(model.state_dict())
            if out:
                best_path = save_checkpoint(out / "best.pt", model, _downstream_meta(config, source_method, task, epoch, model))
        if max_steps is not None and steps >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    meta = read_meta_or(best_path, _downstream_meta(config, source_method, task, -1, model))
    return TrainResult(model, meta, best_path, None, logger.rows, best)


def finetune(checkpoint, task: TaskSplits, config: RunConfig, store: VolumeStore, out_dir=None, max_steps=None) -> TrainResult:
    """Adapt a pre-trained checkpoint (path, TrainResult or (model, meta)) to a downstream task.

    The pre-trained model is deep-copied, so one checkpoint can seed many trials.
    """
    model, meta = _resolve_checkpoint(checkpoint)
    if meta.kind != "pretrain" or meta.method not in ("TOV", "TOP", "TOPC"):
        raise ConfigError(f"finetune needs a TOV/TOP/TOPC pre-training checkpoint, got {meta.kind}/{meta.method}")
    seed_everything(config.seed)
    source = copy.deepcopy(model)
    down = build_downstream(source, meta.method, task.num_input_images, task.num_classes, config.encoder, config.hidden, config.resolution)
    enc_params = list(down.encoder.parameters())
    enc_ids = {id(p) for p in enc_params}
    head_params = [p for p in down.parameters() if id(p) not in enc_ids]
    fc = config.finetune
    groups = [{"params": enc_params, "lr": fc.lr_encoder}, {"params": head_params, "lr": fc.lr_head}]
    return train_downstream(down, meta.method, task, config, store, groups, out_dir, max_steps)


def train_supervised(task: TaskSplits, config: RunConfig, store: VolumeStore, out_dir=None, max_steps=None) -> TrainResult:
    """Same downstream architecture and loop, randomly initialised; every parameter trains at ``lr_head``."""
    seed_everything(config.seed)
    model = build_downstream(None, "SUPERVISED", task.num_input_images, task.num_classes, config.encoder, config.hidden, config.resolution)
    groups = [{"params": list(model.parameters()), "lr": config.finetune.lr_head}]
    return train_downstream(model, "SUPERVISED", task, config, store, groups, out_dir, max_steps)


def _resolve_checkpoint(checkpoint) -> tuple[nn.Module, CheckpointMeta]:
    if isinstance(checkpoint, TrainResult):
        return checkpoint.model, checkpoint.meta
    if isinstance(checkpoint, tuple):
        return checkpoint
    if checkpoint is None:
        raise FileNotFoundError("no checkpoint given")
    return load_checkpoint(checkpoint)
