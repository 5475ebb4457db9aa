"""Random training-time augmentation of image/label patch pairs.

Rotation, scaling and elastic deformation are folded into one coordinate
warp sampled with ``scipy.ndimage.map_coordinates`` (linear for images,
nearest for labels). Gamma and mirroring follow. Every random draw comes from
a generator seeded by the caller, so a seed fully determines the output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage


@dataclass
class AugmentConfig:
    rotation_deg: Tuple[float, float, float] = (15.0, 15.0, 15.0)
    scale_range: Tuple[float, float] = (0.85, 1.15)
    elastic_sigma: float = 8.0
    elastic_magnitude: float = 4.0
    gamma_range: Tuple[float, float] = (0.7, 1.5)
    mirror_axes: Tuple[int, ...] = (0, 1, 2)
    p_rotation: float = 0.3
    p_scale: float = 0.3
    p_elastic: float = 0.3
    p_gamma: float = 0.3
    p_mirror: float = 0.5

    def violations(self) -> List[str]:
        errs = []
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            errs.append(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            errs.append(f"gamma_range must satisfy 0 < lo <= hi, got {self.gamma_range}")
        for name in ("p_rotation", "p_scale", "p_elastic", "p_gamma", "p_mirror"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                errs.append(f"{name} must be in [0, 1], got {p}")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            errs.append(f"mirror_axes must be a subset of (0, 1, 2), got {self.mirror_axes}")
        if self.elastic_sigma <= 0 or self.elastic_magnitude < 0:
            errs.append("elastic_sigma must be > 0 and elastic_magnitude >= 0")
        return errs

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotation=0.0, p_scale=0.0, p_elastic=0.0, p_gamma=0.0, p_mirror=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """R = Rz @ Ry @ Rx for rotations about the x, y and z axes."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _center(shape) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1) / 2


def warp_pair(image: np.ndarray, label: np.ndarray, matrix: np.ndarray,
              displacement: np.ndarray | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the forward transform ``matrix`` about the patch center.

    Output voxel ``o`` samples the input at ``M^-1 (o - c) + c + d(o)``,
    so content at input position ``p`` moves to ``M (p - c) + c``.
    """
    shape = image.shape
    c = _center(shape)
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1) - c[:, None]
    coords = np.linalg.inv(matrix) @ grid + c[:, None]
    if displacement is not None:
        coords += displacement.reshape(3, -1)
    coords = coords.reshape((3,) + shape)
    fill = float(image.min())
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1,
                                  mode="constant", cval=fill)
    lab = ndimage.map_coordinates(label, coords, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), lab.astype(label.dtype)


def elastic_field(shape, sigma: float, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smoothed random displacement field scaled so its peak equals ``magnitude`` voxels."""
    out = np.empty((3,) + tuple(shape))
    for k in range(3):
        d = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="constant")
        peak = np.abs(d).max()
        out[k] = d / peak * magnitude if peak > 0 else 0.0
    return out


def gamma_transform(image: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return image.copy()
    unit = (image.astype(np.float64) - lo) / (hi - lo)
    return (unit ** gamma * (hi - lo) + lo).astype(image.dtype)


def mirror(arr: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return np.flip(arr, axis=tuple(axes)).copy() if len(axes) else arr.copy()


def augment_pair(image: np.ndarray, label: np.ndarray, config: AugmentConfig,
                 seed) -> Tuple[np.ndarray, np.ndarray]:
    if image.shape != label.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} differ in shape")
    rng = np.random.default_rng(seed)
    image, label = image.copy(), label.copy()

    matrix = np.eye(3)
    warped = False
    if rng.random() < config.p_rotation:
        angles = [rng.uniform(-r, r) for r in config.rotation_deg]
        matrix = rotation_matrix(angles) @ matrix
        warped = True
    if rng.random() < config.p_scale:
        matrix = matrix * rng.uniform(*config.scale_range)
        warped = True
    disp = None
    if rng.random() < config.p_elastic and config.elastic_magnitude > 0:
        disp = elastic_field(image.shape, config.elastic_sigma, config.elastic_magnitude, rng)
        warped = True
    if warped:
        image, label = warp_pair(image, label, matrix, disp)

    if rng.random() < config.p_gamma:
        image = gamma_transform(image, rng.uniform(*config.gamma_range))

    axes = [a for a in config.mirror_axes if rng.random() < config.p_mirror]
    if axes:
        image, label = mirror(image, axes), mirror(label, axes)
    return image, label
