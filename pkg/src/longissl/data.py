"""Core domain types: volumes, scan records, manifests, sequences, permutations.

Everything here is immutable after construction so it can be shared freely
between data-loading workers.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np

FULL_RESOLUTION = (150, 192, 192)
DESK_RESOLUTION = (32, 32, 32)
DAYS_PER_YEAR = 365.25
MIN_GAP_YEARS = 1.0
MAX_GAP_YEARS = 2.5
MAX_SEQUENCE_LENGTH = 4

MANIFEST_HEADER = ("patient_id", "scan_id", "acquisition_date", "label", "volume_path", "dataset_id")
SPLIT_HEADER = ("patient_id", "split")


class ValidationError(ValueError):
    """Raised when an input violates a domain invariant."""


class Label(str, enum.Enum):
    CN = "CN"
    MCI = "MCI"
    AD = "AD"
    UNLABELED = "UNLABELED"

    @property
    def stage(self) -> int:
        """Disease stage; CN < MCI < AD. UNLABELED has no stage (-1)."""
        return {"CN": 0, "MCI": 1, "AD": 2}.get(self.value, -1)


DIAGNOSES = (Label.CN, Label.MCI, Label.AD)


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class TaskKind(str, enum.Enum):
    STABLE_CLASSIFICATION = "STABLE_CLASSIFICATION"
    CONVERSION_DETECTION = "CONVERSION_DETECTION"
    FUTURE_CONVERSION = "FUTURE_CONVERSION"


# --------------------------------------------------------------------------
# Volumes
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Volume:
    """Single-channel 3D scan, depth-major (D, H, W)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite intensities")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def check_resolution(self, resolution: Seq[int]) -> None:
        if self.shape != tuple(resolution):
            raise ValidationError(f"volume shape {self.shape} != working resolution {tuple(resolution)}")


def _volume_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path.with_suffix(".raw"), path
    return path, path.with_suffix(".json")


def save_volume(path: str | Path, vol: Volume) -> Path:
    """Write ``<stem>.raw`` (little-endian float32, depth-major) plus a ``<stem>.json`` header."""
    raw_path, hdr_path = _volume_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(vol.data.astype("<f4", copy=False).tobytes(order="C"))
    header = {"shape": list(vol.shape), "spacing": list(vol.spacing), "dtype": "float32le", "order": "DHW"}
    hdr_path.write_text(json.dumps(header))
    return raw_path


def load_volume(path: str | Path) -> Volume:
    raw_path, hdr_path = _volume_paths(path)
    header = json.loads(hdr_path.read_text())
    if header.get("dtype") != "float32le":
        raise ValidationError(f"unsupported dtype tag {header.get('dtype')!r} in {hdr_path}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.fromfile(raw_path, dtype="<f4")
    if data.size != math.prod(shape):
        raise ValidationError(f"{raw_path}: {data.size} voxels on disk, header says {shape}")
    return Volume(data.reshape(shape), tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def read_volume_header(path: str | Path) -> dict:
    return json.loads(_volume_paths(path)[1].read_text())


# --------------------------------------------------------------------------
# Records and manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanRecord:
    patient_id: str
    scan_id: str
    acquisition_date: dt.date
    label: Label
    volume_path: str
    dataset_id: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.patient_id, self.scan_id)


def gap_years(earlier: dt.date, later: dt.date) -> float:
    return (later - earlier).days / DAYS_PER_YEAR


@dataclass(frozen=True)
class Manifest:
    records: tuple[ScanRecord, ...]
    split_assignment: dict[str, Split] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.key in seen:
                raise ValidationError(f"duplicate (patient_id, scan_id) {r.key}")
            seen.add(r.key)
        splits = {pid: Split(s) for pid, s in self.split_assignment.items()}
        object.__setattr__(self, "split_assignment", splits)
        if splits:
            missing = sorted({r.patient_id for r in self.records} - set(splits))
            if missing:
                raise ValidationError(f"patients without a split assignment: {missing[:5]}")

    def patients(self, split: Split | None = None) -> list[str]:
        pids = sorted({r.patient_id for r in self.records})
        if split is None:
            return pids
        return [p for p in pids if self.split_assignment.get(p) == Split(split)]

    def records_for(self, patient_id: str) -> list[ScanRecord]:
        return sorted((r for r in self.records if r.patient_id == patient_id), key=lambda r: r.acquisition_date)

    def by_patient(self) -> dict[str, list[ScanRecord]]:
        out: dict[str, list[ScanRecord]] = {}
        for r in self.records:
            out.setdefault(r.patient_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: (r.acquisition_date, r.scan_id))
        return out


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def read_manifest(path: str | Path, split_path: str | Path | None = None) -> tuple[Manifest, list[dict]]:
    """Load a manifest CSV (and optional split CSV).

    Rows with unparseable dates or labels are rejected individually; the
    second return value lists them with a reason.
    """
    path = Path(path)
    records, rejected = [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: manifest missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                date = parse_date(row["acquisition_date"])
            except ValueError:
                rejected.append({"line": lineno, "row": row, "reason": "unparseable acquisition_date"})
                continue
            try:
                label = Label((row["label"] or "UNLABELED").strip().upper())
            except ValueError:
                rejected.append({"line": lineno, "row": row, "reason": "unknown label"})
                continue
            vpath = row["volume_path"]
            if vpath and not Path(vpath).is_absolute():
                vpath = str(path.parent / vpath)
            records.append(ScanRecord(row["patient_id"], row["scan_id"], date, label, vpath, row["dataset_id"]))
    splits = read_splits(split_path) if split_path else {}
    return Manifest(tuple(records), splits), rejected


def read_splits(path: str | Path) -> dict[str, Split]:
    out: dict[str, Split] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            split = Split(row["split"].strip().upper())
            if pid in out and out[pid] != split:
                raise ValidationError(f"patient {pid} assigned to more than one split")
            out[pid] = split
    return out


def write_manifest(path: str | Path, manifest: Manifest, relative_to: str | Path | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to else None
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            vpath = r.volume_path
            if base is not None:
                try:
                    vpath = str(Path(vpath).relative_to(base))
                except ValueError:
                    pass
            w.writerow([r.patient_id, r.scan_id, r.acquisition_date.isoformat(), r.label.value, vpath, r.dataset_id])


def write_splits(path: str | Path, split_assignment: dict[str, Split]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPLIT_HEADER)
        for pid in sorted(split_assignment):
            w.writerow([pid, Split(split_assignment[pid]).value])


# --------------------------------------------------------------------------
# Sequences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Sequence:
    """Chronologically ordered 2-4 scans of one patient with bounded gaps."""

    scans: tuple[ScanRecord, ...]
    min_gap: float = field(default=MIN_GAP_YEARS, compare=False, repr=False)
    max_gap: float = field(default=MAX_GAP_YEARS, compare=False, repr=False)

    def __post_init__(self):
        scans = tuple(self.scans)
        object.__setattr__(self, "scans", scans)
        if not 2 <= len(scans) <= MAX_SEQUENCE_LENGTH:
            raise ValidationError(f"sequence length must be in [2, {MAX_SEQUENCE_LENGTH}], got {len(scans)}")
        if len({s.patient_id for s in scans}) != 1:
            raise ValidationError("sequence mixes patients")
        for a, b in zip(scans, scans[1:]):
            if not a.acquisition_date < b.acquisition_date:
                raise ValidationError("sequence scans must be strictly increasing in date")
            g = gap_years(a.acquisition_date, b.acquisition_date)
            if not self.min_gap <= g <= self.max_gap:
                raise ValidationError(f"gap {g:.3f}y outside [{self.min_gap}, {self.max_gap}]")

    @property
    def patient_id(self) -> str:
        return self.scans[0].patient_id

    @property
    def gaps_years(self) -> tuple[float, ...]:
        return scan_gaps(self.scans)

    def __len__(self) -> int:
        return len(self.scans)


def scan_gaps(scans: Seq[ScanRecord]) -> tuple[float, ...]:
    return tuple(gap_years(a.acquisition_date, b.acquisition_date) for a, b in zip(scans, scans[1:]))


# --------------------------------------------------------------------------
# Permutations (lexicographic / Lehmer-code rank)
# --------------------------------------------------------------------------


def _check_bijection(order: Seq[int]) -> tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(len(order))):
        raise ValidationError(f"{order} is not a permutation of 0..{len(order) - 1}")
    return order


def permutation_to_index(order: Seq[int]) -> int:
    """Lexicographic rank of ``order`` among all permutations of its length."""
    order = _check_bijection(order)
    n = len(order)
    if not 2 <= n <= MAX_SEQUENCE_LENGTH:
        raise ValidationError(f"permutation length must be in [2, {MAX_SEQUENCE_LENGTH}], got {n}")
    rank = 0
    for i, v in enumerate(order):
        smaller_after = sum(1 for w in order[i + 1:] if w < v)
        rank += smaller_after * math.factorial(n - 1 - i)
    return rank


def index_to_permutation(n: int, class_index: int) -> tuple[int, ...]:
    if not 2 <= n <= MAX_SEQUENCE_LENGTH:
        raise ValidationError(f"permutation length must be in [2, {MAX_SEQUENCE_LENGTH}], got {n}")
    if not 0 <= class_index < math.factorial(n):
        raise ValidationError(f"class index {class_index} out of range for n={n}")
    pool = list(range(n))
    out = []
    for i in range(n - 1, -1, -1):
        q, class_index = divmod(class_index, math.factorial(i))
        out.append(pool.pop(q))
    return tuple(out)


def apply_permutation(seq: Seq, order: Seq[int]) -> list:
    """``out[k] = seq[order[k]]``."""
    order = _check_bijection(order)
    if len(seq) != len(order):
        raise ValidationError(f"length mismatch: {len(seq)} items, permutation of {len(order)}")
    return [seq[i] for i in order]


def inverse_permutation(order: Seq[int]) -> tuple[int, ...]:
    order = _check_bijection(order)
    inv = [0] * len(order)
    for k, i in enumerate(order):
        inv[i] = k
    return tuple(inv)


@dataclass(frozen=True)
class Permutation:
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", _check_bijection(self.order))
        permutation_to_index(self.order)

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def class_index(self) -> int:
        return permutation_to_index(self.order)

    @property
    def is_identity(self) -> bool:
        return self.order == tuple(range(self.n))

    @classmethod
    def from_index(cls, n: int, class_index: int) -> "Permutation":
        return cls(index_to_permutation(n, class_index))

    def apply(self, seq: Seq) -> list:
        return apply_permutation(seq, self.order)

    def inverse(self) -> "Permutation":
        return Permutation(inverse_permutation(self.order))


def all_permutations(n: int) -> list[tuple[int, ...]]:
    """All permutations of range(n) in class-index order."""
    return [index_to_permutation(n, i) for i in range(math.factorial(n))]


# --------------------------------------------------------------------------
# Downstream task datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSample:
    scans: tuple[ScanRecord, ...]
    label: int

    @property
    def patient_id(self) -> str:
        return self.scans[0].patient_id

    @property
    def gaps_years(self) -> tuple[float, ...]:
        return scan_gaps(self.scans)


@dataclass(frozen=True)
class TaskDataset:
    task_kind: TaskKind
    num_input_images: int
    samples: tuple[TaskSample, ...]
    class_names: tuple[str, ...]
    split: Split | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not 1 <= self.num_input_images <= 3:
            raise ValidationError("num_input_images must be 1, 2 or 3")
        for s in self.samples:
            if len(s.scans) != self.num_input_images:
                raise ValidationError(f"sample has {len(s.scans)} scans, dataset expects {self.num_input_images}")
            if not 0 <= s.label < len(self.class_names):
                raise ValidationError(f"label {s.label} outside {self.class_names}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def patients(self) -> set[str]:
        return {s.patient_id for s in self.samples}

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def degenerate(self) -> bool:
        """True if some class has no samples (training refuses such sets)."""
        present = set(int(y) for y in self.labels())
        return len(present) < self.num_classes


@dataclass(frozen=True)
class TaskSplits:
    """Train/val/test partitions of one downstream task; patient-disjoint."""

    train: TaskDataset
    val: TaskDataset
    test: TaskDataset
    name: str = "task"

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        kinds = {(p.task_kind, p.num_input_images, p.class_names) for p in parts}
        if len(kinds) != 1:
            raise ValidationError("task partitions disagree on kind, input count or classes")
        for a, b in itertools.combinations(parts, 2):
            if a.patients() & b.patients():
                raise ValidationError("task partitions share patients")

    @property
    def num_input_images(self) -> int:
        return self.train.num_input_images

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.train.class_names

    @property
    def task_kind(self) -> TaskKind:
        return self.train.task_kind


def unique_records(samples: Iterable[TaskSample]) -> list[ScanRecord]:
    seen, out = set(), []
    for s in samples:
        for r in s.scans:
            if r.key not in seen:
                seen.add(r.key)
                out.append(r)
    return out
