"""Synthetic kidney/tumor phantoms with analytically known labels.

Structures are defined in millimetres; voxel ``(i, j, k)`` has its centre at
``(i*dx, j*dy, k*dz)``. Kidneys are axis-aligned ellipsoids, tumors spheres,
and tumor voxels override kidney voxels where both apply.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .volcore import LabelVolume, PathLike, Spacing, Volume, save_case_dir

Vec3 = Tuple[float, float, float]


@dataclass
class Ellipsoid:
    center: Vec3
    radii: Vec3


@dataclass
class Sphere:
    center: Vec3
    radius: float
    attached: bool = True


@dataclass
class PhantomSpec:
    shape: Tuple[int, int, int] = (72, 72, 36)
    spacing: Vec3 = (1.5, 1.5, 3.0)
    kidneys: List[Ellipsoid] = field(default_factory=list)
    tumors: List[Sphere] = field(default_factory=list)
    background_mean: float = -50.0
    kidney_mean: float = 120.0
    tumor_mean: float = 60.0
    noise_sigma: float = 15.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class PhantomError(ValueError):
    pass


def _coords(shape, spacing):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(shape, spacing)]


def ellipsoid_mask(shape, spacing, e: Ellipsoid) -> np.ndarray:
    x, y, z = _coords(shape, spacing)
    (cx, cy, cz), (rx, ry, rz) = e.center, e.radii
    return (((x - cx) / rx)[:, None, None] ** 2 + ((y - cy) / ry)[None, :, None] ** 2
            + ((z - cz) / rz)[None, None, :] ** 2) <= 1.0


def sphere_mask(shape, spacing, s: Sphere) -> np.ndarray:
    return ellipsoid_mask(shape, spacing, Ellipsoid(s.center, (s.radius,) * 3))


def _check_bounds(spec: PhantomSpec, center, radii, what: str) -> None:
    extent = [(n - 1) * s for n, s in zip(spec.shape, spec.spacing)]
    for c, r, e in zip(center, radii, extent):
        if c - r < 0 or c + r > e:
            raise PhantomError(f"{what} at {tuple(center)} radius {tuple(radii)} leaves the volume")


def rasterize(spec: PhantomSpec) -> np.ndarray:
    for k in spec.kidneys:
        _check_bounds(spec, k.center, k.radii, "kidney")
    for t in spec.tumors:
        _check_bounds(spec, t.center, (t.radius,) * 3, "tumor")
    if len(spec.kidneys) > 2 or len(spec.tumors) > 3:
        raise PhantomError("at most 2 kidneys and 3 tumors")
    label = np.zeros(spec.shape, dtype=np.uint8)
    kidney = np.zeros(spec.shape, dtype=bool)
    for k in spec.kidneys:
        kidney |= ellipsoid_mask(spec.shape, spec.spacing, k)
    label[kidney] = 1
    for t in spec.tumors:
        tumor = sphere_mask(spec.shape, spec.spacing, t)
        if t.attached:
            touching = ndimage.binary_dilation(tumor, np.ones((3, 3, 3), bool)) & kidney
            if not touching.any():
                raise PhantomError(f"tumor at {t.center} is flagged attached but touches no kidney")
        label[tumor] = 2
    return label


def generate(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    label = rasterize(spec)
    means = np.array([spec.background_mean, spec.kidney_mean, spec.tumor_mean])
    image = means[label]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        image = image + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    spacing = Spacing.of(spec.spacing)
    return Volume(image.astype(np.float32), spacing), LabelVolume(label, spacing)


def default_spec(seed: int = 0) -> PhantomSpec:
    """Two kidneys, one tumor attached to the first."""
    spec = PhantomSpec(seed=seed)
    ext = [(n - 1) * s for n, s in zip(spec.shape, spec.spacing)]
    left = Ellipsoid((0.3 * ext[0], 0.5 * ext[1], 0.5 * ext[2]), (13.0, 18.0, 24.0))
    right = Ellipsoid((0.7 * ext[0], 0.5 * ext[1], 0.5 * ext[2]), (13.0, 18.0, 24.0))
    tumor = Sphere((left.center[0] - 10.0, left.center[1] + 14.0, left.center[2]), 12.0)
    return replace(spec, kidneys=[left, right], tumors=[tumor])


def random_spec(base: PhantomSpec, rng: np.random.Generator, jitter_spacing: bool = True,
                seed: int = 0) -> PhantomSpec:
    """Jitter spacing, kidney placement/size and tumor placement/size around ``base``."""
    extent = np.array([(n - 1) * s for n, s in zip(base.shape, base.spacing)])
    spacing = np.array(base.spacing, dtype=np.float64)
    if jitter_spacing:
        spacing = spacing * np.array([rng.uniform(0.9, 1.1)] * 2 + [rng.uniform(0.8, 1.25)])
        spacing = np.round(spacing, 3)
    shape = tuple(int(v) for v in np.floor(extent / spacing) + 1)
    kidneys = []
    n_kid = len(base.kidneys) or 2
    template = base.kidneys or default_spec().kidneys
    for i in range(n_kid):
        k = template[i % len(template)]
        radii = np.array(k.radii) * rng.uniform(0.85, 1.15, size=3)
        center = np.array(k.center) + rng.uniform(-6, 6, size=3)
        center = np.clip(center, radii + 1.0, extent - radii - 1.0)
        kidneys.append(Ellipsoid(tuple(center.round(3)), tuple(radii.round(3))))
    tumors = []
    n_tum = len(base.tumors) if base.tumors else 1
    for i in range(n_tum):
        host = kidneys[int(rng.integers(len(kidneys)))]
        radius = float(np.round(rng.uniform(9.0, 13.0), 3))
        direction = rng.normal(size=3)
        direction[2] *= 0.5
        direction /= np.linalg.norm(direction)
        # a point on the host surface, pulled slightly inside so the sphere overlaps it
        center = np.array(host.center) + 0.85 * direction * np.array(host.radii)
        center = np.clip(center, radius + 1.0, extent - radius - 1.0)
        tumors.append(Sphere(tuple(center.round(3)), radius, True))
    return replace(base, shape=shape, spacing=tuple(float(s) for s in spacing),
                   kidneys=kidneys, tumors=tumors, seed=seed)


def make_dataset(out_dir: PathLike, n: int, seed: int = 0, base: Optional[PhantomSpec] = None,
                 jitter_spacing: bool = True) -> Path:
    """Write ``n`` phantom cases plus ``manifest.json`` into ``out_dir``."""
    if n < 1:
        raise ValueError("need at least one case")
    base = base or default_spec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    manifest = {"seed": seed, "n": n, "cases": []}
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        case_seed = int(child.generate_state(1)[0])
        for _ in range(100):
            spec = random_spec(base, rng, jitter_spacing, seed=case_seed)
            try:
                image, label = generate(spec)
                break
            except PhantomError:
                continue
        else:
            raise PhantomError(f"could not place structures for case {i}")
        case_id = f"case_{i:05d}"
        save_case_dir(out / case_id, image, label)
        manifest["cases"].append({"id": case_id, "shape": list(spec.shape),
                                  "spacing": list(spec.spacing), "spec": spec.to_dict()})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
