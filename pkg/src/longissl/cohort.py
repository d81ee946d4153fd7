"""Sequence extraction, task-set construction and per-epoch patient sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import (
    DIAGNOSES,
    MAX_GAP_YEARS,
    MAX_SEQUENCE_LENGTH,
    MIN_GAP_YEARS,
    Label,
    Manifest,
    ScanRecord,
    Sequence,
    Split,
    TaskDataset,
    TaskKind,
    TaskSample,
    TaskSplits,
    ValidationError,
    gap_years,
)

log = logging.getLogger(__name__)

ANY = None  # sample_epoch: any sequence length

# Reference pool sizes reported for the full-scale pre-training cohort (patients).
REFERENCE_POOL_PATIENTS = {2: 3161, 3: 1114, 4: 445}


@dataclass(frozen=True)
class SequencePool:
    split: Split | None
    by_patient: dict[str, dict[int, tuple[Sequence, ...]]]
    report: dict = field(default_factory=dict, compare=False)

    def patients(self) -> list[str]:
        return sorted(self.by_patient)

    def sequences(self, n: int | None = None) -> list[Sequence]:
        out = []
        for pid in self.patients():
            for length, seqs in sorted(self.by_patient[pid].items()):
                if n is None or length == n:
                    out.extend(seqs)
        return out

    def available_lengths(self) -> list[int]:
        return sorted({n for d in self.by_patient.values() for n, s in d.items() if s})

    def counts(self) -> dict[int, dict[str, int]]:
        """Per length: number of sequences and number of patients that have one."""
        out = {}
        for n in range(2, MAX_SEQUENCE_LENGTH + 1):
            seqs = [len(d.get(n, ())) for d in self.by_patient.values()]
            out[n] = {"sequences": sum(seqs), "patients": sum(1 for c in seqs if c)}
        return out

    def __len__(self) -> int:
        return len(self.by_patient)


def _chains(scans: list[ScanRecord], min_gap: float, max_gap: float, max_len: int) -> Iterable[tuple[ScanRecord, ...]]:
    """Depth-first enumeration of chronological subsets with bounded consecutive gaps."""

    def grow(chain: list[int]):
        if len(chain) >= 2:
            yield tuple(scans[i] for i in chain)
        if len(chain) == max_len:
            return
        last = scans[chain[-1]].acquisition_date
        for j in range(chain[-1] + 1, len(scans)):
            g = gap_years(last, scans[j].acquisition_date)
            if g > max_gap:
                break
            if g >= min_gap:
                yield from grow(chain + [j])

    for i in range(len(scans)):
        yield from grow([i])


def extract_sequences(
    manifest: Manifest,
    split: Split | None = None,
    min_gap: float = MIN_GAP_YEARS,
    max_gap: float = MAX_GAP_YEARS,
    max_len: int = MAX_SEQUENCE_LENGTH,
) -> SequencePool:
    """Every chronological scan subset of length 2..max_len whose consecutive gaps lie in [min_gap, max_gap].

    ``split=None`` uses all patients regardless of split assignment.
    """
    if not min_gap < max_gap:
        raise ValidationError("min_gap must be < max_gap")
    if not 2 <= max_len <= MAX_SEQUENCE_LENGTH:
        raise ValidationError(f"max_len must be in [2, {MAX_SEQUENCE_LENGTH}]")
    split = Split(split) if split is not None else None
    by_patient: dict[str, dict[int, tuple[Sequence, ...]]] = {}
    single_scan = no_valid_gap = 0
    for pid, scans in manifest.by_patient().items():
        if split is not None and manifest.split_assignment.get(pid) != split:
            continue
        if len(scans) < 2:
            single_scan += 1
            continue
        grouped: dict[int, list[Sequence]] = {}
        for chain in _chains(scans, min_gap, max_gap, max_len):
            grouped.setdefault(len(chain), []).append(Sequence(chain, min_gap, max_gap))
        if not grouped:
            no_valid_gap += 1
            continue
        by_patient[pid] = {n: tuple(v) for n, v in sorted(grouped.items())}
    pool = SequencePool(split, by_patient)
    pool.report.update(
        split=split.value if split else None,
        min_gap=min_gap,
        max_gap=max_gap,
        max_len=max_len,
        patients=len(by_patient),
        excluded={"single_scan": single_scan, "no_gap_in_range": no_valid_gap},
        counts={str(n): c for n, c in pool.counts().items()},
    )
    return pool


def write_report(path: str | Path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, default=str))


# --------------------------------------------------------------------------
# Downstream task sets
# --------------------------------------------------------------------------

CLASS_NAMES = tuple(lbl.value for lbl in DIAGNOSES)


def build_classification_sets(pool: SequencePool) -> tuple[TaskDataset, TaskDataset, TaskDataset]:
    """Label-constant triplets, and the same triplets truncated to pairs and singles.

    Returns ``(single, pair, triplet)`` datasets with index-aligned samples.
    """
    triplets, mixed, unlabeled = [], 0, 0
    for seq in pool.sequences(3):
        labels = {s.label for s in seq.scans}
        if Label.UNLABELED in labels:
            unlabeled += 1
        elif len(labels) != 1:
            mixed += 1
        else:
            triplets.append(seq)
    info = {"excluded_mixed_label": mixed, "excluded_unlabeled": unlabeled, "patients": len({s.patient_id for s in triplets})}
    out = []
    for k in (1, 2, 3):
        samples = [TaskSample(seq.scans[:k], seq.scans[0].label.stage) for seq in triplets]
        out.append(TaskDataset(TaskKind.STABLE_CLASSIFICATION, k, samples, CLASS_NAMES, pool.split, dict(info)))
    return tuple(out)


def build_conversion_sets(pool: SequencePool, from_label: Label | str, to_label: Label | str) -> tuple[TaskDataset, TaskDataset]:
    """Pairs starting at ``from_label``: converted (label 1) if the second scan is ``to_label``, stable (0) if unchanged.

    Returns ``(detection, prediction)``; prediction keeps only the first scan.
    """
    src, dst = Label(from_label), Label(to_label)
    if src == dst:
        raise ValidationError("from_label and to_label must differ")
    detection, excluded = [], 0
    for seq in pool.sequences(2):
        a, b = seq.scans
        if a.label != src or b.label not in (src, dst):
            excluded += 1
            continue
        detection.append(TaskSample(seq.scans, int(b.label == dst)))
    names = (f"stable_{src.value}", f"{src.value}_to_{dst.value}")
    info = {"excluded": excluded, "positives": sum(s.label for s in detection)}
    info["negatives"] = len(detection) - info["positives"]
    info["degenerate"] = info["positives"] == 0 or info["negatives"] == 0
    det = TaskDataset(TaskKind.CONVERSION_DETECTION, 2, detection, names, pool.split, dict(info))
    pred = TaskDataset(
        TaskKind.FUTURE_CONVERSION, 1, [TaskSample(s.scans[:1], s.label) for s in detection], names, pool.split, dict(info)
    )
    return det, pred


def classification_task(pools: dict[Split, SequencePool], num_images: int) -> TaskSplits:
    parts = {sp: build_classification_sets(pools[sp])[num_images - 1] for sp in Split}
    return TaskSplits(parts[Split.TRAIN], parts[Split.VAL], parts[Split.TEST], name=f"classification_{num_images}img")


def conversion_task(pools: dict[Split, SequencePool], from_label, to_label, predict: bool = False) -> TaskSplits:
    parts = {sp: build_conversion_sets(pools[sp], from_label, to_label)[int(predict)] for sp in Split}
    kind = "prediction_1img" if predict else "detection_2img"
    name = f"{Label(from_label).value}_to_{Label(to_label).value}_{kind}"
    return TaskSplits(parts[Split.TRAIN], parts[Split.VAL], parts[Split.TEST], name=name)


def split_pools(manifest: Manifest, min_gap=MIN_GAP_YEARS, max_gap=MAX_GAP_YEARS, max_len=MAX_SEQUENCE_LENGTH) -> dict[Split, SequencePool]:
    return {sp: extract_sequences(manifest, sp, min_gap, max_gap, max_len) for sp in Split}


# --------------------------------------------------------------------------
# Per-epoch sampling
# --------------------------------------------------------------------------


def sample_epoch(pool: SequencePool, n: int | None, rng_seed: int) -> list[Sequence]:
    """At most one sequence per patient, uniform among that patient's eligible sequences.

    With a fixed ``n`` patients lacking a length-``n`` sequence sit the epoch out.
    """
    if n is not None and n not in (2, 3, 4):
        raise ValidationError(f"n must be 2, 3, 4 or ANY, got {n}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for pid in pool.patients():
        per_len = pool.by_patient[pid]
        eligible = [s for length, seqs in sorted(per_len.items()) if n is None or length == n for s in seqs]
        if eligible:
            out.append(eligible[int(rng.integers(len(eligible)))])
    return out


def sample_task_epoch(dataset: TaskDataset, rng_seed: int) -> list[TaskSample]:
    """One sample per patient, drawn uniformly."""
    rng = np.random.default_rng(rng_seed)
    grouped: dict[str, list[TaskSample]] = {}
    for s in dataset.samples:
        grouped.setdefault(s.patient_id, []).append(s)
    return [grouped[pid][int(rng.integers(len(grouped[pid])))] for pid in sorted(grouped)]
