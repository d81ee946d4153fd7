"""Synthetic longitudinal phantom cohort.

Each patient is a brain-like ellipsoid (intensity ~1) containing a dark
ventricle ellipsoid that grows linearly in time at a class-dependent rate.
Edges are rendered with partial-volume occupancy, so sub-voxel growth still
changes voxel intensities. Converters switch label and growth rate at a
sampled visit; disease stage never regresses.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    DAYS_PER_YEAR,
    DIAGNOSES,
    Label,
    Manifest,
    ScanRecord,
    Split,
    ValidationError,
    Volume,
    load_volume,
    read_volume_header,
    save_volume,
    write_manifest,
    write_splits,
)

MAX_VENTRICLE_FRACTION = 0.9  # of brain radius; keeps the ventricle inside the brain


@dataclass
class PhantomSpec:
    """Geometry is expressed relative to the brain radius so it scales with resolution."""

    num_patients: int = 120
    scans_per_patient: tuple[int, int] = (2, 4)
    gap_range: tuple[float, float] = (1.0, 2.5)
    resolution: tuple[int, int, int] = (32, 32, 32)
    class_fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # CN, MCI, AD
    # ventricle radius growth per year, as a fraction of brain radius
    atrophy_rates: tuple[float, float, float] = (0.02, 0.04, 0.06)
    baseline_ventricle: float = 0.2
    baseline_jitter: float = 0.05
    disease_duration_range: tuple[float, float] = (0.0, 2.0)  # years of growth before the first visit
    conversion_probability: float = 0.3
    brain_fraction: float = 0.8  # brain radius / half field of view
    brain_jitter: float = 0.05
    center_jitter: float = 1.0  # voxels
    noise_std: float = 0.03
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    dataset_id: str = "PHANTOM"
    start_date: str = "2005-01-01"
    seed: int = 0

    def __post_init__(self):
        self.scans_per_patient = tuple(int(v) for v in self.scans_per_patient)
        self.gap_range = tuple(float(v) for v in self.gap_range)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.class_fractions = tuple(float(v) for v in self.class_fractions)
        self.atrophy_rates = tuple(float(v) for v in self.atrophy_rates)
        self.disease_duration_range = tuple(float(v) for v in self.disease_duration_range)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        lo, hi = self.scans_per_patient
        if not 1 <= lo <= hi:
            raise ValidationError("scans_per_patient must satisfy 1 <= lo <= hi")
        g0, g1 = self.gap_range
        if not 0 < g0 <= g1 <= 5:
            raise ValidationError("gap_range must lie in (0, 5] years")
        r = self.atrophy_rates
        if len(r) != 3 or not 0 <= r[0] < r[1] < r[2]:
            raise ValidationError("atrophy rates must be strictly ordered CN < MCI < AD")
        if not 0 <= self.conversion_probability <= 1:
            raise ValidationError("conversion_probability must be in [0, 1]")
        if abs(sum(self.split_fractions) - 1) > 1e-6 or abs(sum(self.class_fractions) - 1) > 1e-6:
            raise ValidationError("split and class fractions must each sum to 1")

    def max_ventricle_fraction(self) -> float:
        span = self.disease_duration_range[1] + (self.scans_per_patient[1] - 1) * self.gap_range[1]
        return self.baseline_ventricle + self.baseline_jitter + max(self.atrophy_rates) * span

    def check_fits(self) -> None:
        brain_r = self.brain_fraction * (1 - self.brain_jitter) * min(self.resolution) / 2 - self.center_jitter
        if min(self.resolution) < 12 or brain_r < 5:
            raise ValidationError(f"resolution {self.resolution} too small to contain the phantom")
        if self.max_ventricle_fraction() >= MAX_VENTRICLE_FRACTION:
            raise ValidationError(
                f"ventricle can reach {self.max_ventricle_fraction():.2f} of the brain radius "
                f"(limit {MAX_VENTRICLE_FRACTION}); lower rates, gaps or visit count"
            )


# ventricle axis ratios relative to its nominal radius
VENTRICLE_SHAPE = np.array([0.8, 1.0, 0.7])


def _occupancy(grid: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Partial-volume occupancy of an axis-aligned ellipsoid (approx. one-voxel ramp)."""
    rho = np.sqrt(sum(((grid[i] - center[i]) / radii[i]) ** 2 for i in range(3)))
    scale = float(np.exp(np.mean(np.log(radii))))
    return np.clip(0.5 - (rho - 1.0) * scale, 0.0, 1.0)


def render_phantom(shape, brain_center, brain_radii, ventricle_radius: float, noise_std: float, rng) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    brain = _occupancy(grid, brain_center, brain_radii)
    vent = _occupancy(grid, brain_center, ventricle_radius * VENTRICLE_SHAPE)
    img = brain * (1.0 - vent)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=shape)
    return img.astype(np.float32)


@dataclass
class PhantomPatient:
    patient_id: str
    base_label: Label
    visit_years: list[float]
    labels: list[Label]
    ventricle_radius: list[float]  # voxels, one per visit
    brain_center: np.ndarray
    brain_radii: np.ndarray
    converts_at: int | None = None


def _simulate_patient(spec: PhantomSpec, idx: int, label: Label, rng: np.random.Generator) -> PhantomPatient:
    half = np.array(spec.resolution) / 2.0
    brain_r = spec.brain_fraction * half * rng.uniform(1 - spec.brain_jitter, 1 + spec.brain_jitter, 3)
    brain_r = np.minimum(brain_r, half - 1.0)
    center = (np.array(spec.resolution) - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
    ref = float(np.min(brain_r))
    n_visits = int(rng.integers(spec.scans_per_patient[0], spec.scans_per_patient[1] + 1))
    lo_days = math.ceil(spec.gap_range[0] * DAYS_PER_YEAR)
    hi_days = math.floor(spec.gap_range[1] * DAYS_PER_YEAR)
    days = np.concatenate([[0], np.cumsum(rng.integers(lo_days, hi_days + 1, n_visits - 1))]).astype(int)
    years = days / DAYS_PER_YEAR
    stage = label.stage
    converts_at = None
    if stage < 2 and n_visits >= 2 and rng.random() < spec.conversion_probability:
        converts_at = int(rng.integers(1, n_visits))
    r0 = spec.baseline_ventricle + rng.uniform(-spec.baseline_jitter, spec.baseline_jitter)
    r0 += spec.atrophy_rates[stage] * rng.uniform(*spec.disease_duration_range)
    # piecewise-linear growth; converters switch rate at the midpoint between visits
    switch = None if converts_at is None else 0.5 * (years[converts_at - 1] + years[converts_at])
    radii, labels = [], []
    for v, t in enumerate(years):
        if switch is None or t <= switch:
            frac = r0 + spec.atrophy_rates[stage] * t
            lbl = label
        else:
            frac = r0 + spec.atrophy_rates[stage] * switch + spec.atrophy_rates[stage + 1] * (t - switch)
            lbl = DIAGNOSES[stage + 1]
        radii.append(frac * ref)
        labels.append(lbl)
    return PhantomPatient(f"P{idx:04d}", label, list(years), labels, radii, center, brain_r, converts_at)


@dataclass
class Cohort:
    manifest: Manifest
    root: Path
    patients: list[PhantomPatient] = field(repr=False)
    manifest_path: Path | None = None
    splits_path: Path | None = None


def _assign_splits(patients: list[PhantomPatient], fractions, rng) -> dict[str, Split]:
    """Stratified by baseline class; patient-disjoint by construction."""
    out = {}
    for lbl in DIAGNOSES:
        pids = [p.patient_id for p in patients if p.base_label == lbl]
        pids = [pids[i] for i in rng.permutation(len(pids))]
        n_train = int(round(fractions[0] * len(pids)))
        n_val = int(round(fractions[1] * len(pids)))
        for i, pid in enumerate(pids):
            out[pid] = Split.TRAIN if i < n_train else Split.VAL if i < n_train + n_val else Split.TEST
    return out


def generate_cohort(spec: PhantomSpec, out_dir: str | Path) -> Cohort:
    """Render every scan to ``out_dir/volumes`` and write ``manifest.csv``, ``splits.csv`` and ``truth.csv``."""
    spec.check_fits()
    out_dir = Path(out_dir)
    root_rng = np.random.default_rng(spec.seed)
    counts = np.floor(np.array(spec.class_fractions) * spec.num_patients).astype(int)
    counts[np.argmax(spec.class_fractions)] += spec.num_patients - counts.sum()
    labels = [lbl for lbl, c in zip(DIAGNOSES, counts) for _ in range(c)]
    labels = [labels[i] for i in root_rng.permutation(len(labels))]
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_patients)
    start = dt.date.fromisoformat(spec.start_date)
    records, patients, truth = [], [], []
    for idx, (label, ss) in enumerate(zip(labels, seeds)):
        rng = np.random.default_rng(ss)
        p = _simulate_patient(spec, idx, label, rng)
        patients.append(p)
        first = start + dt.timedelta(days=int(rng.integers(0, 5 * 365)))
        for v, (t, lbl, vr) in enumerate(zip(p.visit_years, p.labels, p.ventricle_radius)):
            date = first + dt.timedelta(days=int(round(t * DAYS_PER_YEAR)))
            arr = render_phantom(spec.resolution, p.brain_center, p.brain_radii, vr, spec.noise_std, rng)
            scan_id = f"{p.patient_id}_V{v}"
            path = save_volume(out_dir / "volumes" / f"{scan_id}.raw", Volume(arr))
            records.append(ScanRecord(p.patient_id, scan_id, date, lbl, str(path), spec.dataset_id))
            truth.append((p.patient_id, scan_id, lbl.value, f"{vr:.6f}"))
    splits = _assign_splits(patients, spec.split_fractions, root_rng)
    manifest = Manifest(tuple(records), splits)
    mpath, spath = out_dir / "manifest.csv", out_dir / "splits.csv"
    write_manifest(mpath, manifest, relative_to=out_dir)
    write_splits(spath, splits)
    with (out_dir / "truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "scan_id", "label", "ventricle_radius_vox"))
        w.writerows(truth)
    return Cohort(manifest, out_dir, patients, mpath, spath)


# --------------------------------------------------------------------------
# Verification
# --------------------------------------------------------------------------


def ventricle_volume(arr: np.ndarray) -> float:
    """Intensity deficit (in voxel units) inside the eroded brain mask.

    Partial-volume rendering makes this track sub-voxel growth, and the
    zero-mean noise largely cancels in the sum.
    """
    smooth = ndimage.gaussian_filter(arr.astype(np.float64), 1.0)
    inner = ndimage.binary_erosion(ndimage.binary_fill_holes(smooth > 0.5), iterations=2)
    return float((1.0 - arr[inner]).sum())


def verify_cohort(manifest: Manifest, resolution=None) -> dict:
    """Check files, label ordering and monotone ventricle growth; findings empty means pass."""
    findings = []
    for pid, recs in manifest.by_patient().items():
        counts, stages = [], []
        for r in recs:
            path = Path(r.volume_path)
            if not path.exists() or not path.with_suffix(".json").exists():
                findings.append({"patient_id": pid, "scan_id": r.scan_id, "kind": "missing_file", "path": str(path)})
                continue
            hdr = read_volume_header(path)
            if resolution is not None and tuple(hdr["shape"]) != tuple(resolution):
                findings.append({"patient_id": pid, "scan_id": r.scan_id, "kind": "shape_mismatch", "shape": hdr["shape"]})
                continue
            counts.append((r.scan_id, ventricle_volume(load_volume(path).data)))
            stages.append(r.label.stage)
        for a, b in zip(recs, recs[1:]):
            if a.label.stage >= 0 and b.label.stage >= 0 and b.label.stage < a.label.stage:
                findings.append({"patient_id": pid, "kind": "label_regression", "scans": [a.scan_id, b.scan_id], "labels": [a.label.value, b.label.value]})
        for (sa, ca), (sb, cb) in zip(counts, counts[1:]):
            if not cb > ca:
                findings.append({"patient_id": pid, "kind": "ventricle_not_growing", "scans": [sa, sb], "volume": [ca, cb]})
    return {"ok": not findings, "num_records": len(manifest.records), "num_patients": len(manifest.patients()), "findings": findings}
