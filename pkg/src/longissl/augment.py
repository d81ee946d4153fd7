"""Volume augmentations and intensity normalisation.

All randomness comes from an explicit ``numpy.random.Generator`` so that a
fixed seed reproduces outputs bitwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence as Seq

import numpy as np
from scipy import ndimage

from .data import FULL_RESOLUTION, ValidationError, Volume

CROP_MIN_FULL = (90, 115, 115)


def _interval(x) -> tuple[float, float]:
    lo, hi = (float(v) for v in x)
    if lo > hi:
        raise ValidationError(f"empty range ({lo}, {hi})")
    return lo, hi


def _prob(p) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"probability {p} outside [0, 1]")
    return p


@dataclass
class AugmentParams:
    """Pre-training augmentation (defaults are the full-resolution values)."""

    rotation_max_rad: float = 0.34
    translation_max_vox: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.3)
    smooth_sigma_range: tuple[float, float] = (0.25, 1.5)
    noise_std_range: tuple[float, float] = (0.05, 0.09)
    per_transform_prob: float = 0.5

    def __post_init__(self):
        self.scale_range = _interval(self.scale_range)
        self.smooth_sigma_range = _interval(self.smooth_sigma_range)
        self.noise_std_range = _interval(self.noise_std_range)
        self.per_transform_prob = _prob(self.per_transform_prob)
        if self.rotation_max_rad < 0 or self.translation_max_vox < 0:
            raise ValidationError("rotation and translation bounds must be non-negative")


@dataclass
class DownstreamAugmentParams:
    crop_min_fraction: tuple[float, float, float] = tuple(c / f for c, f in zip(CROP_MIN_FULL, FULL_RESOLUTION))
    flip_prob: float = 0.5
    affine_prob: float = 0.7
    rotation_max_rad: float = 0.1
    scale_delta: float = 0.15
    translation_max_vox: float = 5.0
    shift_offset: float = 0.1
    shift_prob: float = 0.5
    noise_std: float = 0.1
    noise_prob: float = 0.2

    def __post_init__(self):
        self.crop_min_fraction = tuple(float(f) for f in self.crop_min_fraction)
        if not all(0 < f <= 1 for f in self.crop_min_fraction):
            raise ValidationError("crop_min_fraction entries must be in (0, 1]")
        for name in ("flip_prob", "affine_prob", "shift_prob", "noise_prob"):
            setattr(self, name, _prob(getattr(self, name)))

    @classmethod
    def identity(cls) -> "DownstreamAugmentParams":
        return cls(crop_min_fraction=(1.0, 1.0, 1.0), flip_prob=0, affine_prob=0, shift_prob=0, noise_prob=0)


def scale_translation(voxels: float, resolution: Seq[int], reference: Seq[int] = FULL_RESOLUTION) -> float:
    """Rescale a voxel translation bound from ``reference`` to ``resolution`` (mean axis ratio)."""
    return float(voxels * np.mean([r / f for r, f in zip(resolution, reference)]))


# --------------------------------------------------------------------------
# Primitive transforms
# --------------------------------------------------------------------------


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)


def rotation_matrix(angles: Seq[float]) -> np.ndarray:
    a, b, c = angles
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class AffineDraw:
    matrix: np.ndarray  # forward map about the volume centre
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


def draw_affine(rng: np.random.Generator, rotation_max: float, scale_lo: float, scale_hi: float, translation_max: float) -> AffineDraw:
    angles = rng.uniform(-rotation_max, rotation_max, size=3)
    scales = rng.uniform(scale_lo, scale_hi, size=3)
    shift = rng.uniform(-translation_max, translation_max, size=3)
    return AffineDraw(rotation_matrix(angles) @ np.diag(scales), shift)


def apply_affine(arr: np.ndarray, draw: AffineDraw) -> np.ndarray:
    """Trilinear resampling, zero outside the field of view."""
    center = (np.array(arr.shape) - 1) / 2.0
    inv = np.linalg.inv(draw.matrix)
    # ndimage maps output coords o to input coords inv @ o + offset
    offset = center - inv @ (center + draw.translation)
    out = ndimage.affine_transform(arr, inv, offset=offset, order=1, mode="constant", cval=0.0)
    return out.astype(np.float32, copy=False)


def resize(arr: np.ndarray, shape: Seq[int]) -> np.ndarray:
    if arr.shape == tuple(shape):
        return arr
    factors = [s / a for s, a in zip(shape, arr.shape)]
    out = ndimage.zoom(arr, factors, order=1, mode="nearest", grid_mode=False)
    if out.shape != tuple(shape):  # rounding guard
        out = out[tuple(slice(0, s) for s in shape)]
        out = np.pad(out, [(0, s - o) for s, o in zip(shape, out.shape)], mode="edge")
    return out.astype(np.float32, copy=False)


# --------------------------------------------------------------------------
# Pre-training augmentation
# --------------------------------------------------------------------------


def _check_uniform(arrays: list[np.ndarray]) -> None:
    if not arrays:
        raise ValidationError("empty sequence")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"volumes in a sequence must share a shape, got {sorted(shapes)}")


def pretrain_augment(seq_volumes: Seq, params: AugmentParams, rng: np.random.Generator) -> list[np.ndarray]:
    """One affine shared by every timepoint, then independent smoothing and noise per timepoint."""
    arrays = [_as_array(v) for v in seq_volumes]
    _check_uniform(arrays)
    p = params.per_transform_prob
    if rng.random() < p:
        draw = draw_affine(rng, params.rotation_max_rad, *params.scale_range, params.translation_max_vox)
        arrays = [apply_affine(a, draw) for a in arrays]
    out = []
    for a in arrays:
        if rng.random() < p:
            a = ndimage.gaussian_filter(a, sigma=rng.uniform(*params.smooth_sigma_range, size=3)).astype(np.float32)
        if rng.random() < p:
            std = rng.uniform(*params.noise_std_range)
            a = a + rng.normal(0.0, std, size=a.shape).astype(np.float32)
        out.append(a)
    return out


def make_two_views(seq_volumes: Seq, params: AugmentParams, rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return pretrain_augment(seq_volumes, params, rng), pretrain_augment(seq_volumes, params, rng)


# --------------------------------------------------------------------------
# Downstream augmentation
# --------------------------------------------------------------------------


def _draw_downstream(shape, params: DownstreamAugmentParams, rng: np.random.Generator) -> dict:
    """Geometric and intensity-shift draws; noise is drawn at apply time."""
    size = tuple(int(rng.integers(max(1, int(round(f * s))), s + 1)) for f, s in zip(params.crop_min_fraction, shape))
    start = tuple(int(rng.integers(0, s - c + 1)) for s, c in zip(shape, size)) if size != tuple(shape) else None
    draw = {"crop": (start, size) if start is not None else None, "flip": rng.random() < params.flip_prob, "affine": None, "shift": None}
    if rng.random() < params.affine_prob:
        draw["affine"] = draw_affine(rng, params.rotation_max_rad, 1 - params.scale_delta, 1 + params.scale_delta, params.translation_max_vox)
    if rng.random() < params.shift_prob:
        draw["shift"] = np.float32(rng.uniform(-params.shift_offset, params.shift_offset))
    return draw


def _apply_downstream(a: np.ndarray, draw: dict, params: DownstreamAugmentParams, rng: np.random.Generator) -> np.ndarray:
    shape = a.shape
    if draw["crop"] is not None:
        start, size = draw["crop"]
        a = resize(a[tuple(slice(o, o + c) for o, c in zip(start, size))], shape)
    if draw["flip"]:
        a = np.ascontiguousarray(a[:, :, ::-1])
    if draw["affine"] is not None:
        a = apply_affine(a, draw["affine"])
    if draw["shift"] is not None:
        a = a + draw["shift"]
    if rng.random() < params.noise_prob:
        a = a + rng.normal(0.0, params.noise_std, size=a.shape).astype(np.float32)
    return a


def downstream_augment(vol, params: DownstreamAugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Crop+resize, width flip, affine, intensity shift, noise; in that order."""
    a = _as_array(vol)
    return _apply_downstream(a, _draw_downstream(a.shape, params, rng), params, rng)


def downstream_augment_sequence(seq_volumes: Seq, params: DownstreamAugmentParams, rng: np.random.Generator) -> list[np.ndarray]:
    """Downstream augmentation for multi-scan samples: one geometric draw for all scans, noise per scan."""
    arrays = [_as_array(v) for v in seq_volumes]
    _check_uniform(arrays)
    draw = _draw_downstream(arrays[0].shape, params, rng)
    return [_apply_downstream(a, draw, params, rng) for a in arrays]


# --------------------------------------------------------------------------
# Normalisation
# --------------------------------------------------------------------------


class NormMode(str, enum.Enum):
    ZSCORE = "ZSCORE"
    STD_SUBTRACT = "STD_SUBTRACT"


@dataclass(frozen=True)
class NormStats:
    train_mean: float
    train_std: float

    def __post_init__(self):
        if not self.train_std > 0:
            raise ValidationError("train_std must be > 0")

    @classmethod
    def from_volumes(cls, volumes: Seq) -> "NormStats":
        """Pooled voxel mean/std over a training set (two-pass, float64)."""
        arrays = [_as_array(v) for v in volumes]
        if not arrays:
            raise ValidationError("no volumes to compute statistics from")
        count = sum(a.size for a in arrays)
        mean = sum(float(a.sum(dtype=np.float64)) for a in arrays) / count
        var = sum(float(((a.astype(np.float64) - mean) ** 2).sum()) for a in arrays) / count
        return cls(mean, float(np.sqrt(var)))


def normalize(vol, stats: NormStats, mode: NormMode | str = NormMode.ZSCORE) -> np.ndarray:
    if not stats.train_std > 0:
        raise ValidationError("train_std must be > 0")
    a = _as_array(vol)
    if NormMode(mode) is NormMode.ZSCORE:
        return ((a - np.float32(stats.train_mean)) / np.float32(stats.train_std)).astype(np.float32)
    return (a - np.float32(stats.train_std)).astype(np.float32)
