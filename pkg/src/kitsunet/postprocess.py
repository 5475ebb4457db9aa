"""Connected-component cleanup of kidney/tumor segmentations.

Components are taken over the kidney-or-tumor union: at most the two largest
survive, and within those a component that contains tumor but no kidney is
dropped, so tumor touching a kidney is kept together with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volcore import LabelVolume

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass
class ComponentMap:
    ids: np.ndarray
    sizes: np.ndarray  # sizes[k - 1] is the voxel count of component k
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.sizes)


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentMap:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    ids, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    sizes = np.bincount(ids.ravel(), minlength=n + 1)[1:]
    return ComponentMap(ids.astype(np.int32), sizes.astype(np.int64), connectivity)


def apply_rules(seg: LabelVolume, connectivity: int = 26, max_components: int = 2) -> LabelVolume:
    data = seg.data
    comps = connected_components(data > 0, connectivity)
    out = data.copy()
    if comps.count == 0:
        return LabelVolume(out, seg.spacing)
    flat = comps.ids.ravel()
    # first voxel (C order) of each component breaks size ties
    first = np.full(comps.count + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, comps.count + 1), key=lambda k: (-comps.sizes[k - 1], first[k]))
    keep = np.zeros(comps.count + 1, dtype=bool)
    keep[order[:max_components]] = True
    has_kidney = np.zeros(comps.count + 1, dtype=bool)
    has_kidney[np.unique(comps.ids[data == 1])] = True
    has_kidney[0] = False

    drop = ~keep[comps.ids]
    drop |= (data == 2) & ~has_kidney[comps.ids]
    drop &= comps.ids > 0
    out[drop] = 0
    return LabelVolume(out, seg.spacing)
