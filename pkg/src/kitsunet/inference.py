"""Sliding-window prediction with mirror test-time augmentation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np
import torch

from .preprocess import resample_array
from .volcore import CropRecord, LabelVolume, ProbabilityVolume, Spacing, Volume, pad_to_shape


@dataclass(frozen=True)
class WindowGrid:
    origins: Tuple[Tuple[int, int, int], ...]
    window: Tuple[int, int, int]
    stride: Tuple[int, int, int]

    def hit_counts(self, shape: Sequence[int]) -> np.ndarray:
        counts = np.zeros(tuple(shape), dtype=np.int32)
        for o in self.origins:
            counts[tuple(slice(a, a + w) for a, w in zip(o, self.window))] += 1
        return counts


def axis_origins(length: int, window: int, stride: int) -> List[int]:
    if window > length:
        raise ValueError(f"window {window} exceeds axis length {length}")
    last = length - window
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def make_grid(shape: Sequence[int], window: Sequence[int], overlap: float = 0.5) -> WindowGrid:
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = tuple(max(1, math.ceil(w * (1 - overlap))) for w in window)
    per_axis = [axis_origins(n, w, s) for n, w, s in zip(shape, window, stride)]
    origins = tuple(itertools.product(*per_axis))
    return WindowGrid(origins, tuple(int(w) for w in window), stride)


def mirror_combinations(axes: Sequence[int]) -> List[Tuple[int, ...]]:
    axes = sorted(set(axes))
    return [c for r in range(len(axes) + 1) for c in itertools.combinations(axes, r)]


def _full_res_logits(out) -> torch.Tensor:
    return out[0] if isinstance(out, (list, tuple)) else out


def predict_window(network: Callable, patch: torch.Tensor,
                   mirrors: Sequence[Tuple[int, ...]]) -> torch.Tensor:
    """Mean softmax over mirrored copies of one (1, 1, X, Y, Z) patch."""
    acc = None
    for axes in mirrors:
        dims = [a + 2 for a in axes]
        x = torch.flip(patch, dims) if dims else patch
        prob = torch.softmax(_full_res_logits(network(x)).double(), dim=1)
        if dims:
            prob = torch.flip(prob, dims)
        acc = prob if acc is None else acc + prob
    return acc / len(mirrors)


def blend_windows(grid: WindowGrid, shape: Sequence[int],
                  window_values: Iterable[np.ndarray]) -> np.ndarray:
    """Uniform average of per-window ``(C, *window)`` arrays, in grid order."""
    counts = grid.hit_counts(shape)
    acc = None
    for origin, values in zip(grid.origins, window_values):
        sl = tuple(slice(o, o + w) for o, w in zip(origin, grid.window))
        if acc is None:
            acc = np.zeros((values.shape[0],) + tuple(shape), dtype=np.float64)
        acc[(slice(None),) + sl] += values
    return acc / counts[None]


def predict_volume(network: Callable, volume: Volume, window: Sequence[int],
                   overlap: float = 0.5, mirror_axes: Sequence[int] = (0, 1, 2),
                   device: str = "cpu") -> ProbabilityVolume:
    """Average per-window softmax over the sliding-window grid.

    ``network`` maps a ``(1, 1, *window)`` tensor to logits or a list whose
    first entry holds the full-resolution logits. The volume must be at least
    as large as the window (see ``pad_for_window``).
    """
    shape = volume.shape
    if any(w > n for w, n in zip(window, shape)):
        raise ValueError(f"window {tuple(window)} exceeds volume {shape}; pad first")
    grid = make_grid(shape, window, overlap)
    mirrors = mirror_combinations(mirror_axes)
    data = torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))
    if isinstance(network, torch.nn.Module):
        network.eval()

    def windows():
        with torch.no_grad():
            for origin in grid.origins:
                sl = tuple(slice(o, o + w) for o, w in zip(origin, grid.window))
                patch = data[sl][None, None].to(device)
                yield predict_window(network, patch, mirrors)[0].cpu().numpy()

    probs = blend_windows(grid, shape, windows())
    probs /= probs.sum(0, keepdims=True)
    return ProbabilityVolume(probs.astype(np.float32), volume.spacing)


def pad_for_window(volume: Volume, window: Sequence[int]) -> Tuple[Volume, CropRecord]:
    """Centre-pad with the volume minimum so every axis is at least the window length."""
    data, record = pad_to_shape(volume.data, window, fill=float(volume.data.min()), center=True)
    return Volume(data, volume.spacing), record


@dataclass(frozen=True)
class CaseGeometry:
    """What ``finalize`` needs to map a network-space prediction back to the input grid."""

    crop: CropRecord
    original_shape: Tuple[int, int, int]
    original_spacing: Spacing

    def to_dict(self) -> dict:
        return {"crop": self.crop.to_dict(), "original_shape": list(self.original_shape),
                "original_spacing": list(self.original_spacing.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict) -> "CaseGeometry":
        return cls(CropRecord.from_dict(d["crop"]), tuple(int(v) for v in d["original_shape"]),
                   Spacing.of(d["original_spacing"]))


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=0).astype(np.uint8)


def finalize(prob: ProbabilityVolume, geometry: CaseGeometry) -> LabelVolume:
    if geometry is None:
        raise ValueError("case geometry record is required")
    data = geometry.crop.crop(prob.data)
    target_shape = tuple(geometry.original_shape)
    if data.shape[1:] != target_shape or prob.spacing != geometry.original_spacing:
        ratios = [o / n for o, n in zip(geometry.original_spacing.as_tuple(),
                                        prob.spacing.as_tuple())]
        data = resample_array(data, target_shape, ratios, "linear")
    return LabelVolume(argmax_labels(data), geometry.original_spacing)
