"""Intensity clipping, global foreground normalization and resampling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Tuple

import numpy as np

from .volcore import LabelVolume, PathLike, Spacing, Volume

EPS = 1e-8


@dataclass(frozen=True)
class DatasetStats:
    clip_lo: float
    clip_hi: float
    fg_mean: float
    fg_std: float
    target_spacing: Spacing

    def __post_init__(self):
        if self.clip_lo > self.clip_hi:
            raise ValueError(f"clip_lo {self.clip_lo} > clip_hi {self.clip_hi}")
        if self.fg_std < 0:
            raise ValueError("fg_std must be >= 0")

    def to_dict(self) -> dict:
        return {"clip_lo": self.clip_lo, "clip_hi": self.clip_hi,
                "fg_mean": self.fg_mean, "fg_std": self.fg_std,
                "target_spacing": list(self.target_spacing.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(float(d["clip_lo"]), float(d["clip_hi"]), float(d["fg_mean"]),
                   float(d["fg_std"]), Spacing.of(d["target_spacing"]))

    def save(self, path: PathLike) -> None:
        # repr-exact floats survive the JSON round trip
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: PathLike) -> "DatasetStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def percentile(values: np.ndarray, q: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="linear"))


def compute_dataset_stats(cases: Iterable[Tuple[Volume, LabelVolume]],
                          lo_pct: float = 0.5, hi_pct: float = 99.5) -> DatasetStats:
    """Pool foreground intensities over all cases and derive clip/normalization stats."""
    fg, spacings = [], []
    for vol, lab in cases:
        if lab.shape != vol.shape:
            raise ValueError(f"label shape {lab.shape} != image shape {vol.shape}")
        fg.append(np.asarray(vol.data, dtype=np.float64)[lab.data > 0])
        spacings.append(vol.spacing.as_tuple())
    if not spacings:
        raise ValueError("no training cases given")
    pooled = np.concatenate(fg)
    if pooled.size == 0:
        raise ValueError("training set has no foreground voxels")
    lo, hi = percentile(pooled, lo_pct), percentile(pooled, hi_pct)
    clipped = np.clip(pooled, lo, hi)
    target = Spacing.of(np.median(np.asarray(spacings), axis=0))
    return DatasetStats(lo, hi, float(clipped.mean()), float(clipped.std()), target)


def clip_and_normalize(vol: Volume, stats: DatasetStats) -> Volume:
    data = np.clip(np.asarray(vol.data, dtype=np.float64), stats.clip_lo, stats.clip_hi)
    data = (data - stats.fg_mean) / max(stats.fg_std, EPS)
    return Volume(data.astype(np.float32), vol.spacing)


def resampled_shape(shape: Sequence[int], spacing: Spacing, target: Spacing) -> Tuple[int, ...]:
    return tuple(max(1, int(round(n * s / t)))
                 for n, s, t in zip(shape, spacing.as_tuple(), target.as_tuple()))


def _axis_coords(n_out: int, ratio: float, n_in: int) -> np.ndarray:
    # output index i sits at source coordinate i * ratio, clamped to the grid
    return np.clip(np.arange(n_out, dtype=np.float64) * ratio, 0.0, n_in - 1)


def _interp_axis(data: np.ndarray, coords: np.ndarray, axis: int, mode: str) -> np.ndarray:
    n_in = data.shape[axis]
    if mode == "nearest":
        idx = np.minimum(np.floor(coords + 0.5).astype(np.int64), n_in - 1)
        return np.take(data, idx, axis=axis)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = coords - i0
    shape = [1] * data.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(data, i0, axis=axis) * (1.0 - w) + np.take(data, i1, axis=axis) * w


def resample_array(data: np.ndarray, out_shape: Sequence[int], ratios: Sequence[float],
                   mode: str = "linear") -> np.ndarray:
    """Resample the trailing three axes. Trilinear is applied as three 1D passes."""
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    out = np.asarray(data)
    if mode == "linear":
        out = out.astype(np.float64)
    lead = out.ndim - 3
    for k in range(3):
        n_in, n_out = out.shape[lead + k], int(out_shape[k])
        if n_in == n_out and ratios[k] == 1.0:
            continue
        out = _interp_axis(out, _axis_coords(n_out, ratios[k], n_in), lead + k, mode)
    return out


def resample(vol, target: Spacing, mode: str = "linear"):
    """Resample a Volume or LabelVolume onto ``target`` spacing.

    LabelVolume input always uses nearest-neighbour sampling.
    """
    target = Spacing.of(target)
    src = vol.spacing
    out_shape = resampled_shape(vol.shape, src, target)
    ratios = [t / s for t, s in zip(target.as_tuple(), src.as_tuple())]
    if isinstance(vol, LabelVolume):
        return LabelVolume(resample_array(vol.data, out_shape, ratios, "nearest"), target)
    if out_shape == vol.shape and src == target:
        return Volume(vol.data.copy(), target)
    data = resample_array(vol.data, out_shape, ratios, mode)
    return Volume(data.astype(np.float32), target)


def preprocess_case(vol: Volume, stats: DatasetStats, label: LabelVolume | None = None):
    """Normalize intensities then resample onto the dataset voxel spacing."""
    out = resample(clip_and_normalize(vol, stats), stats.target_spacing, "linear")
    if label is None:
        return out, None
    return out, resample(label, stats.target_spacing, "nearest")
