"""Volume containers, padding helpers and case I/O.

Arrays are indexed (x, y, z) with z the through-plane axis. On disk images and
probabilities are float32, labels uint8. Two formats are read: NIfTI
(``.nii``/``.nii.gz``, spacing from ``pixdim``) and raw+sidecar, a
little-endian C-order dump ``<stem>.raw`` next to ``<stem>.json`` holding
``{"shape": [nx, ny, nz], "spacing": [dx, dy, dz], "dtype": "f32"|"u8"}``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

NUM_CLASSES = 3
PathLike = Union[str, Path]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class CaseFormatError(ValueError):
    """A case file is malformed or inconsistent with its partner."""


@dataclass(frozen=True)
class Spacing:
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for v in (self.dx, self.dy, self.dz):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"spacing must be positive and finite, got {self.as_tuple()}")

    @classmethod
    def of(cls, values: Sequence[float]) -> "Spacing":
        if isinstance(values, Spacing):
            return values
        dx, dy, dz = (float(v) for v in values)
        return cls(dx, dy, dz)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)


def _check_3d(data: np.ndarray) -> None:
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"expected a non-empty 3D array, got shape {data.shape}")


@dataclass
class Volume:
    data: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        _check_3d(self.data)
        self.spacing = Spacing.of(self.spacing)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains NaN or Inf")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_3d(data)
        if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
            bad = sorted(set(np.unique(data).tolist()) - set(range(NUM_CLASSES)))
            raise CaseFormatError(f"label values outside {{0,1,2}}: {bad[:10]}")
        self.data = data.astype(np.uint8, copy=False)
        self.spacing = Spacing.of(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class ProbabilityVolume:
    """Class-major soft prediction, ``data.shape == (3, nx, ny, nz)``."""

    data: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"expected (classes, x, y, z), got shape {self.data.shape}")
        self.spacing = Spacing.of(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def is_normalized(self, tol: float = 1e-5) -> bool:
        return bool(np.all(self.data >= 0) and np.all(np.abs(self.data.sum(0) - 1) <= tol))


@dataclass(frozen=True)
class CropRecord:
    """Undo information for padding: original shape plus leading pad per axis."""

    shape: Tuple[int, int, int]
    offset: Tuple[int, int, int] = (0, 0, 0)

    def crop(self, arr: np.ndarray) -> np.ndarray:
        sl = tuple(slice(o, o + n) for o, n in zip(self.offset, self.shape))
        return arr[(Ellipsis,) + sl]

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropRecord":
        return cls(tuple(int(v) for v in d["shape"]), tuple(int(v) for v in d["offset"]))


def pad_to_shape(data: np.ndarray, target: Sequence[int], fill=0,
                 center: bool = False) -> Tuple[np.ndarray, CropRecord]:
    """Pad the trailing three axes of ``data`` up to at least ``target``."""
    spatial = data.shape[-3:]
    total = [max(int(t) - n, 0) for t, n in zip(target, spatial)]
    before = [p // 2 if center else 0 for p in total]
    widths = [(0, 0)] * (data.ndim - 3) + [(b, p - b) for b, p in zip(before, total)]
    record = CropRecord(tuple(int(n) for n in spatial), tuple(before))
    if not any(total):
        return data.copy(), record
    return np.pad(data, widths, mode="constant", constant_values=fill), record


def pad_to_multiple(vol: Volume, multiple: int, fill=0.0) -> Tuple[Volume, CropRecord]:
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    target = [-(-n // multiple) * multiple for n in vol.shape]
    data, record = pad_to_shape(vol.data, target, fill)
    return Volume(data, vol.spacing), record


# ---------------------------------------------------------------- raw + sidecar

def _stem(path: PathLike) -> Path:
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p


def save_raw(path: PathLike, data: np.ndarray, spacing: Sequence[float]) -> Path:
    """Write ``<stem>.raw`` + ``<stem>.json``; returns the ``.raw`` path."""
    stem = _stem(path)
    data = np.asarray(data)
    code = "u8" if data.dtype == np.uint8 else "f32"
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(data, dtype=_DTYPES[code])
    stem.with_suffix(".raw").write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": [int(s) for s in data.shape],
               "spacing": [float(s) for s in Spacing.of(spacing).as_tuple()],
               "dtype": code}
    stem.with_suffix(".json").write_text(json.dumps(sidecar))
    return stem.with_suffix(".raw")


def read_raw(path: PathLike) -> Tuple[np.ndarray, Spacing]:
    stem = _stem(path)
    raw, side = stem.with_suffix(".raw"), stem.with_suffix(".json")
    for p in (raw, side):
        if not p.exists():
            raise FileNotFoundError(p)
    meta = json.loads(side.read_text())
    try:
        dtype = _DTYPES[meta["dtype"]]
        shape = tuple(int(s) for s in meta["shape"])
        spacing = Spacing.of(meta["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"bad sidecar {side}: {exc}") from exc
    buf = raw.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(buf) != expected:
        raise CaseFormatError(f"{raw}: {len(buf)} bytes, sidecar implies {expected}")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy(), spacing


def _read_nifti(path: Path) -> Tuple[np.ndarray, Spacing]:
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    zooms = img.header.get_zooms()[:3]
    return data, Spacing.of(zooms)


def save_nifti(path: PathLike, data: np.ndarray, spacing: Sequence[float]) -> Path:
    import nibabel as nib

    sp = Spacing.of(spacing).as_tuple()
    img = nib.Nifti1Image(np.asarray(data), np.diag(list(sp) + [1.0]))
    img.header.set_zooms(sp)
    nib.save(img, str(path))
    return Path(path)


def read_array(path: PathLike) -> Tuple[np.ndarray, Spacing]:
    p = Path(path)
    name = p.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        if not p.exists():
            raise FileNotFoundError(p)
        return _read_nifti(p)
    return read_raw(p)


def load_case(image_path: PathLike,
              label_path: Optional[PathLike] = None) -> Tuple[Volume, Optional[LabelVolume]]:
    data, spacing = read_array(image_path)
    vol = Volume(data.astype(np.float32, copy=False), spacing)
    if label_path is None:
        return vol, None
    ldata, _ = read_array(label_path)
    if ldata.shape != vol.shape:
        raise CaseFormatError(
            f"label shape {ldata.shape} does not match image shape {vol.shape}")
    if not np.issubdtype(ldata.dtype, np.integer):
        rounded = np.rint(ldata)
        if not np.array_equal(rounded, ldata):
            raise CaseFormatError("label file holds non-integer values")
        ldata = rounded
    ldata = np.asarray(ldata)
    if ldata.min() < 0 or ldata.max() > 2:
        raise CaseFormatError(
            f"label values outside {{0,1,2}}: {sorted(set(np.unique(ldata).tolist()) - {0, 1, 2})[:10]}")
    return vol, LabelVolume(ldata.astype(np.uint8), vol.spacing)


def save_volume(path: PathLike, vol: Union[Volume, LabelVolume]) -> Path:
    return save_raw(path, vol.data, vol.spacing.as_tuple())


# ---------------------------------------------------------------- case directories
# A dataset directory holds one subdirectory per case, each with
# ``imaging.*`` and optionally ``segmentation.*`` (raw+sidecar or NIfTI).

IMAGE_STEM = "imaging"
LABEL_STEM = "segmentation"


def _find(case_dir: Path, stem: str) -> Optional[Path]:
    for suffix in (".raw", ".nii.gz", ".nii"):
        p = case_dir / (stem + suffix)
        if p.exists():
            return p
    return None


def list_cases(dataset_dir: PathLike) -> list:
    """Sorted case ids: subdirectories that contain an image file."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(root)
    return sorted(p.name for p in root.iterdir() if p.is_dir() and _find(p, IMAGE_STEM))


def load_case_dir(case_dir: PathLike, with_label: bool = True):
    case_dir = Path(case_dir)
    image = _find(case_dir, IMAGE_STEM)
    if image is None:
        raise FileNotFoundError(f"no {IMAGE_STEM}.* in {case_dir}")
    label = _find(case_dir, LABEL_STEM) if with_label else None
    return load_case(image, label)


def load_label_dir(case_dir: PathLike) -> LabelVolume:
    p = _find(Path(case_dir), LABEL_STEM)
    if p is None:
        raise FileNotFoundError(f"no {LABEL_STEM}.* in {case_dir}")
    data, spacing = read_array(p)
    return LabelVolume(np.asarray(data).astype(np.uint8), spacing)


def save_case_dir(case_dir: PathLike, image: Optional[Volume] = None,
                  label: Optional[LabelVolume] = None) -> Path:
    case_dir = Path(case_dir)
    if image is not None:
        save_volume(case_dir / IMAGE_STEM, image)
    if label is not None:
        save_volume(case_dir / LABEL_STEM, label)
    return case_dir
