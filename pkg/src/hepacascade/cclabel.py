"""Connected-component labeling, component geometry and the lesion size rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

Connectivity = Literal["face", "full"]


@dataclass(frozen=True)
class Component:
    label: int
    voxel_count: int
    bbox: tuple[tuple[int, int], ...]
    centroid: tuple[float, ...]

    @property
    def extent(self) -> tuple[int, ...]:
        """Bounding-box size per axis, in voxels."""
        return tuple(hi - lo + 1 for lo, hi in self.bbox)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "voxel_count": self.voxel_count,
            "bbox": [list(b) for b in self.bbox],
            "centroid": list(self.centroid),
        }


@dataclass(frozen=True)
class SizeRule:
    threshold: int = 32

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"size threshold must be >= 1, got {self.threshold}")


def structure(ndim: int, connectivity: Connectivity) -> np.ndarray:
    if connectivity not in ("face", "full"):
        raise ValueError(f"connectivity must be 'face' or 'full', got {connectivity!r}")
    return ndimage.generate_binary_structure(ndim, 1 if connectivity == "face" else ndim)


def label(mask, connectivity: Connectivity = "full") -> tuple[np.ndarray, list[Component]]:
    """Label connected foreground regions of a 2D or 3D binary mask.

    Labels run 1..K in raster order of each component's first voxel.
    """
    m = np.asarray(mask).astype(bool)
    raw, k = ndimage.label(m, structure=structure(m.ndim, connectivity))
    if k == 0:
        return raw.astype(np.int32), []

    # renumber by first raster encounter
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = ids[keep][np.argsort(first[keep], kind="stable")]
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]

    idx = np.arange(1, k + 1)
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    centroids = ndimage.center_of_mass(m, labels, idx)
    components = []
    for lab, sl, n, c in zip(idx, ndimage.find_objects(labels), counts, centroids):
        bbox = tuple((s.start, s.stop - 1) for s in sl)
        components.append(Component(int(lab), int(n), bbox, tuple(float(x) for x in c)))
    return labels, components


def is_small(c: Component, rule: SizeRule = SizeRule()) -> bool:
    """True when both in-plane bbox dimensions are at most the threshold.

    The in-plane axes are the last two, so 3D components are judged on
    their (H, W) extent.
    """
    height, width = c.extent[-2:]
    return height <= rule.threshold and width <= rule.threshold


def filter_by_rule(
    mask2d,
    rule: SizeRule = SizeRule(),
    keep: Literal["small", "large"] = "large",
    connectivity: Connectivity = "full",
) -> np.ndarray:
    """Zero every component of ``mask2d`` that does not match ``keep``."""
    if keep not in ("small", "large"):
        raise ValueError(f"keep must be 'small' or 'large', got {keep!r}")
    labels, comps = label(mask2d, connectivity)
    want_small = keep == "small"
    kept = [c.label for c in comps if is_small(c, rule) == want_small]
    return np.isin(labels, kept).astype(np.uint8)


def filter_slices(mask3d, rule: SizeRule = SizeRule(), keep="large", connectivity: Connectivity = "full") -> np.ndarray:
    """Apply ``filter_by_rule`` to every axial slice of a 3D mask."""
    m = np.asarray(mask3d)
    out = np.zeros(m.shape, dtype=np.uint8)
    for z in range(m.shape[0]):
        if m[z].any():
            out[z] = filter_by_rule(m[z], rule, keep, connectivity)
    return out
