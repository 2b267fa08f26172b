"""Histogram-based intensity normalization and equalization of CT volumes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume_io import CTVolume

log = logging.getLogger(__name__)


class NoPeakError(ValueError):
    """No histogram bin qualifies as a peak."""


@dataclass(frozen=True)
class PreprocessConfig:
    bins: int = 256
    clip_range: tuple[float, float] = (-200.0, 400.0)
    peak_prominence: float = 0.05
    target_peak_value: float = 0.9

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        lo, hi = self.clip_range
        if not lo < hi:
            raise ValueError(f"clip range must be increasing, got {self.clip_range}")
        if not 0 < self.peak_prominence <= 1:
            raise ValueError(f"peak_prominence must be in (0, 1], got {self.peak_prominence}")
        if not 0 < self.target_peak_value <= 1:
            raise ValueError(f"target_peak_value must be in (0, 1], got {self.target_peak_value}")


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def _voxels(volume) -> np.ndarray:
    return volume.voxels if isinstance(volume, CTVolume) else np.asarray(volume, dtype=np.float32)


def histogram(volume, cfg: PreprocessConfig = PreprocessConfig()) -> Histogram:
    """Histogram of the clipped intensities over ``cfg.bins`` equal-width bins.

    The last bin is closed on the right so values equal to the upper clip
    bound are counted.
    """
    lo, hi = cfg.clip_range
    v = np.clip(_voxels(volume).astype(np.float64), lo, hi)
    counts, edges = np.histogram(v, bins=cfg.bins, range=(lo, hi))
    return Histogram(edges, counts.astype(np.int64))


def rightmost_peak(h: Histogram, cfg: PreprocessConfig = PreprocessConfig()) -> float:
    """Center of the highest-index strict local maximum above the prominence floor."""
    c = h.counts
    floor = cfg.peak_prominence * c.max()
    left = np.concatenate(([-1], c[:-1]))
    right = np.concatenate((c[1:], [-1]))
    ok = (c > left) & (c > right) & (c >= floor) & (c > 0)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise NoPeakError("histogram has no qualifying local maximum")
    return float(h.centers[idx[-1]])


def normalize_equalize(volume: CTVolume, cfg: PreprocessConfig = PreprocessConfig()) -> CTVolume:
    """Clip, rescale on the rightmost histogram peak, then equalize to [0, 1].

    Rescaling maps the lower clip bound to 0 and the peak to
    ``cfg.target_peak_value``. Equalization maps each intensity through the
    piecewise-linear cumulative histogram of the whole volume.
    """
    lo, hi = cfg.clip_range
    v = np.clip(volume.voxels.astype(np.float64), lo, hi)
    h = histogram(volume, cfg)
    try:
        peak = rightmost_peak(h, cfg)
    except NoPeakError:
        peak = float(h.centers[int(np.argmax(h.counts))])
        log.warning("no qualifying histogram peak; using global maximum bin at %.1f", peak)

    scale = cfg.target_peak_value / (peak - lo)
    r = (v - lo) * scale
    r_hi = (hi - lo) * scale
    counts, edges = np.histogram(r, bins=cfg.bins, range=(0.0, r_hi))
    cdf = np.concatenate(([0.0], np.cumsum(counts, dtype=np.float64) / r.size))
    out = np.clip(np.interp(r, edges, cdf), 0.0, 1.0)
    return volume.with_voxels(out.astype(np.float32))
