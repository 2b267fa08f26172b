"""Training-set construction: liver slices, cleaned lesion slices, small-lesion cubes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cclabel import SizeRule, filter_by_rule, is_small, label
from .volume_io import CTVolume, MissingFileError, ShapeMismatchError, load_mask, load_volume, save_mask, save_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Case:
    """A preprocessed volume with its reference masks."""

    case_id: str
    volume: CTVolume
    liver: np.ndarray
    lesions: np.ndarray | None = None

    def __post_init__(self):
        if self.liver.shape != self.volume.shape:
            raise ShapeMismatchError(f"{self.case_id}: liver mask {self.liver.shape} vs volume {self.volume.shape}")
        if self.lesions is not None and self.lesions.shape != self.volume.shape:
            raise ShapeMismatchError(f"{self.case_id}: lesion mask {self.lesions.shape} vs volume {self.volume.shape}")

    @property
    def masked(self) -> np.ndarray:
        return self.volume.voxels * self.liver


@dataclass(frozen=True, eq=False)
class CubeSample:
    cube: np.ndarray
    target: np.ndarray
    source: tuple[str, tuple[int, int, int]]


def round_half_down(x: float) -> int:
    """Nearest integer, ties toward the lower index."""
    return math.ceil(x - 0.5)


def window_start(center: int, before: int, edge: int, size: int) -> int:
    """Start of an ``edge``-long window with ``before`` cells ahead of ``center``,
    shifted the least amount needed to fit inside ``[0, size)``."""
    return min(max(center - before, 0), size - edge)


def liver_slice_set(cases: Iterable[Case]) -> tuple[np.ndarray, np.ndarray]:
    """Every axial slice of every case paired with its liver mask slice."""
    xs, ys = [], []
    for case in cases:
        xs.append(case.volume.voxels)
        ys.append(case.liver)
    if not xs:
        return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8)
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.uint8)


def lesion_slice_set(cases: Iterable[Case], rule: SizeRule = SizeRule()) -> tuple[np.ndarray, np.ndarray]:
    """Liver-masked slices where the liver is present, with small lesions removed
    from the targets."""
    xs, ys = [], []
    for case in cases:
        if case.lesions is None:
            raise ValueError(f"{case.case_id} has no lesion mask")
        masked = case.masked
        for z in np.flatnonzero(case.liver.any(axis=(1, 2))):
            xs.append(masked[z])
            ys.append(filter_by_rule(case.lesions[z], rule, keep="large"))
    if not xs:
        return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.uint8)


def small_lesion_cubes(
    case: Case,
    rule: SizeRule = SizeRule(),
    cube_edge: int = 32,
    slices_above: int = 15,
    slices_below: int = 16,
) -> list[CubeSample]:
    """One cube per small 2D lesion component on each slice.

    The cube spans ``slices_above`` slices before and ``slices_below`` after
    the component's slice, and the same split in-plane around its rounded
    centroid. Windows are clamped into the volume, never padded. Inputs are
    liver-masked intensities.
    """
    if slices_above + slices_below + 1 != cube_edge:
        raise ValueError("slices_above + slices_below + 1 must equal cube_edge")
    if case.lesions is None:
        raise ValueError(f"{case.case_id} has no lesion mask")
    d, h, w = case.volume.shape
    if min(d, h, w) < cube_edge:
        log.warning("skipping %s: shape %s smaller than cube edge %d", case.case_id, case.volume.shape, cube_edge)
        return []

    masked = case.masked
    samples = []
    for z in np.flatnonzero(case.lesions.any(axis=(1, 2))):
        _, comps = label(case.lesions[z], "full")
        for c in comps:
            if not is_small(c, rule):
                continue
            cy, cx = (round_half_down(v) for v in c.centroid)
            z0 = window_start(int(z), slices_above, cube_edge, d)
            y0 = window_start(cy, slices_above, cube_edge, h)
            x0 = window_start(cx, slices_above, cube_edge, w)
            sl = np.s_[z0 : z0 + cube_edge, y0 : y0 + cube_edge, x0 : x0 + cube_edge]
            samples.append(
                CubeSample(
                    masked[sl].astype(np.float32),
                    case.lesions[sl].astype(np.uint8),
                    (case.case_id, (int(z), cy, cx)),
                )
            )
    return samples


def cube_arrays(samples: Sequence[CubeSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0, 0, 0), np.float32), np.zeros((0, 0, 0, 0), np.uint8)
    return np.stack([s.cube for s in samples]), np.stack([s.target for s in samples])


def save_dataset(out_dir, name: str, inputs: np.ndarray, targets: np.ndarray, sources=None) -> dict:
    """Persist a sample set as two raw volumes stacked along axis 0 plus an index.

    Cubes ``(N, E, E, E)`` are flattened to ``(N*E, E, E)``; the index keeps
    the sample shape so ``load_dataset`` can undo it.
    """
    out = Path(out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    n = len(inputs)
    sample_shape = tuple(int(s) for s in inputs.shape[1:])
    entry = {"name": name, "count": n, "sample_shape": list(sample_shape), "sources": sources or []}
    if n:
        flat = inputs.reshape((-1,) + sample_shape[-2:])
        ref = CTVolume(flat)
        save_volume(ref, out / "inputs.raw")
        save_mask(targets.reshape(flat.shape), ref, out / "targets.raw")
    (out / "index.json").write_text(json.dumps(entry, indent=1))
    return entry


def load_dataset(out_dir, name: str) -> tuple[np.ndarray, np.ndarray]:
    root = Path(out_dir) / name
    if not (root / "index.json").exists():
        raise MissingFileError(f"no dataset index at {root / 'index.json'}")
    entry = json.loads((root / "index.json").read_text())
    shape = (entry["count"], *entry["sample_shape"])
    if entry["count"] == 0:
        return np.zeros(shape, np.float32), np.zeros(shape, np.uint8)
    x = load_volume(root / "inputs.raw").voxels.reshape(shape)
    y = load_mask(root / "targets.raw").reshape(shape)
    return np.array(x), y
