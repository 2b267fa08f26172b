"""Test-time cascade: liver mask, large lesions per slice, small lesions by sliding cube.

Models are plain callables. A slice model maps an ``(N, H, W)`` float array
to seg probabilities of the same shape; a cube model does the same for
``(N, E, E, E)`` batches. ``TorchPredictor`` adapts a trained CompNet.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from .cclabel import SizeRule, filter_slices
from .volume_io import CTVolume, ShapeMismatchError, as_mask

log = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


class CascadeError(RuntimeError):
    pass


class VolumeTooSmallError(CascadeError, ValueError):
    pass


class MissingModelError(CascadeError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    size_threshold: int = 32
    cube_edge: int = 32
    slices_above: int = 15
    slices_below: int = 16
    stride: int = 8
    prob_threshold: float = 0.5
    enable_small_branch: bool = True
    batch_size: int = 16

    def __post_init__(self):
        if not 1 <= self.stride <= self.cube_edge:
            raise ValueError(f"stride must be in [1, cube_edge], got {self.stride}")
        if not 0 < self.prob_threshold < 1:
            raise ValueError("prob_threshold must be in (0, 1)")
        if self.slices_above + self.slices_below + 1 != self.cube_edge:
            raise ValueError("slices_above + slices_below + 1 must equal cube_edge")
        if self.size_threshold < 1:
            raise ValueError("size_threshold must be >= 1")

    @property
    def rule(self) -> SizeRule:
        return SizeRule(self.size_threshold)

    @classmethod
    def scaled(cls, in_plane: int = 64, **kw) -> "CascadeConfig":
        """Geometry for small phantoms: threshold scaled by ``in_plane``/512,
        cube edge and stride halved."""
        edge = 16
        base = dict(
            size_threshold=max(1, round(32 * in_plane / 512)),
            cube_edge=edge,
            slices_above=edge // 2 - 1,
            slices_below=edge // 2,
            stride=4,
        )
        base.update(kw)
        return cls(**base)


class TorchPredictor:
    """Eval-mode CompNet wrapped as a numpy predictor returning seg probabilities."""

    def __init__(self, model: torch.nn.Module, batch_size: int = 16):
        torch.set_flush_denormal(True)
        self.model = model.eval()
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        out = []
        for start in range(0, len(batch), self.batch_size):
            x = torch.from_numpy(np.array(batch[start : start + self.batch_size])).unsqueeze(1)
            out.append(self.model(x).seg[:, 0].numpy())
        return np.concatenate(out) if out else np.zeros_like(batch)


def _voxels(volume) -> np.ndarray:
    return volume.voxels if isinstance(volume, CTVolume) else np.asarray(volume, dtype=np.float32)


def _predict_slices(voxels: np.ndarray, model: Predictor, batch_size: int, which=None) -> np.ndarray:
    probs = np.zeros(voxels.shape, dtype=np.float32)
    zs = np.arange(voxels.shape[0]) if which is None else np.asarray(which)
    for start in range(0, len(zs), batch_size):
        idx = zs[start : start + batch_size]
        p = np.asarray(model(voxels[idx]), dtype=np.float32)
        if p.shape != voxels[idx].shape:
            raise ShapeMismatchError(f"slice model returned {p.shape} for input {voxels[idx].shape}")
        probs[idx] = p
    return probs


def predict_liver(volume, liver_model: Predictor, cfg: CascadeConfig = CascadeConfig()) -> np.ndarray:
    """Slice-by-slice liver probabilities thresholded and stacked into a 3D mask."""
    probs = _predict_slices(_voxels(volume), liver_model, cfg.batch_size)
    return (probs > cfg.prob_threshold).astype(np.uint8)


def apply_liver_mask(volume, mask) -> CTVolume:
    v = volume if isinstance(volume, CTVolume) else CTVolume(volume)
    m = as_mask(mask, v.shape)
    return v.with_voxels(v.voxels * m)


def predict_large_lesions(masked_volume, large_model: Predictor, cfg: CascadeConfig = CascadeConfig(), liver=None) -> np.ndarray:
    """Per-slice lesion masks with small components removed.

    With ``liver`` given, slices without liver are not evaluated.
    """
    voxels = _voxels(masked_volume)
    which = None
    if liver is not None:
        which = np.flatnonzero(as_mask(liver, voxels.shape).any(axis=(1, 2)))
    probs = _predict_slices(voxels, large_model, cfg.batch_size, which)
    return filter_slices(probs > cfg.prob_threshold, cfg.rule, keep="large")


def cube_offsets(size: int, edge: int, stride: int) -> list[int]:
    """Window starts 0, s, 2s, ... plus a last one flush with the end."""
    if size < edge:
        raise VolumeTooSmallError(f"axis of length {size} is shorter than cube edge {edge}")
    offs = list(range(0, size - edge + 1, stride))
    if offs[-1] != size - edge:
        offs.append(size - edge)
    return offs


def small_lesion_probability(masked_volume, small_model: Predictor, cfg: CascadeConfig = CascadeConfig(), liver=None) -> np.ndarray:
    """Voxelwise mean of cube predictions over every evaluated cube covering it.

    Cubes not touching ``liver`` are skipped; voxels covered by no evaluated
    cube get probability 0.
    """
    voxels = _voxels(masked_volume)
    e = cfg.cube_edge
    grids = [cube_offsets(n, e, cfg.stride) for n in voxels.shape]
    if liver is not None:
        liver = as_mask(liver, voxels.shape)
        occupied = np.pad(liver.cumsum(0).cumsum(1).cumsum(2, dtype=np.int64), ((1, 0), (1, 0), (1, 0)))

    def touches_liver(z, y, x) -> bool:
        s = occupied
        a, b, c = z + e, y + e, x + e
        total = (
            s[a, b, c] - s[z, b, c] - s[a, y, c] - s[a, b, x]
            + s[z, y, c] + s[z, b, x] + s[a, y, x] - s[z, y, x]
        )
        return total > 0

    origins = [o for o in itertools.product(*grids) if liver is None or touches_liver(*o)]
    acc = np.zeros(voxels.shape, dtype=np.float64)
    cnt = np.zeros(voxels.shape, dtype=np.int32)
    for start in range(0, len(origins), cfg.batch_size):
        chunk = origins[start : start + cfg.batch_size]
        cubes = np.stack([voxels[z : z + e, y : y + e, x : x + e] for z, y, x in chunk])
        preds = np.asarray(small_model(cubes), dtype=np.float64)
        if preds.shape != cubes.shape:
            raise ShapeMismatchError(f"cube model returned {preds.shape} for input {cubes.shape}")
        for (z, y, x), p in zip(chunk, preds):
            acc[z : z + e, y : y + e, x : x + e] += p
            cnt[z : z + e, y : y + e, x : x + e] += 1
    return np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)


def predict_small_lesions(masked_volume, small_model: Predictor, cfg: CascadeConfig = CascadeConfig(), liver=None) -> np.ndarray:
    """Sliding-cube small-lesion mask: averaged cube probabilities above threshold."""
    return (small_lesion_probability(masked_volume, small_model, cfg, liver) > cfg.prob_threshold).astype(np.uint8)


class CascadeModels(NamedTuple):
    liver: Predictor
    large: Predictor
    small: Predictor | None = None


class CascadeResult(NamedTuple):
    liver: np.ndarray
    lesions: np.ndarray
    large: np.ndarray
    small: np.ndarray | None


def run_cascade(volume, models: CascadeModels, cfg: CascadeConfig = CascadeConfig()) -> CascadeResult:
    """Full test-time pipeline on a preprocessed volume.

    The lesion mask is the union of both branches restricted to the liver.
    Volumes thinner than a cube are zero-padded for the small branch only.
    """
    if models.liver is None or models.large is None:
        raise MissingModelError("liver and large-lesion models are required")
    if cfg.enable_small_branch and models.small is None:
        raise MissingModelError("small-lesion branch is enabled but no small model was given")

    voxels = _voxels(volume)
    liver = predict_liver(voxels, models.liver, cfg)
    masked = voxels * liver
    large = predict_large_lesions(masked, models.large, cfg, liver=liver)
    lesions = large.astype(bool)
    small = None
    if cfg.enable_small_branch:
        pad = [(0, max(0, cfg.cube_edge - n)) for n in voxels.shape]
        small = predict_small_lesions(np.pad(masked, pad), models.small, cfg, liver=np.pad(liver, pad))
        small = small[tuple(slice(0, n) for n in voxels.shape)]
        lesions |= small.astype(bool)
    lesions &= liver.astype(bool)
    return CascadeResult(liver, lesions.astype(np.uint8), large, small)


def load_models(liver_ckpt, large_ckpt, small_ckpt=None, batch_size: int = 16) -> CascadeModels:
    from .compnet_models import load_checkpoint

    small = TorchPredictor(load_checkpoint(small_ckpt), batch_size) if small_ckpt else None
    return CascadeModels(
        TorchPredictor(load_checkpoint(liver_ckpt), batch_size),
        TorchPredictor(load_checkpoint(large_ckpt), batch_size),
        small,
    )


def write_overlays(volume, mask, out_dir, color=(0, 255, 0)) -> list[Path]:
    """Grayscale PNG per slice with the mask outline drawn in ``color``.

    Only slices where ``mask`` is non-empty are written.
    """
    from PIL import Image
    from scipy import ndimage

    voxels = _voxels(volume)
    mask = as_mask(mask, voxels.shape).astype(bool)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(voxels.min()), float(voxels.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    written = []
    for z in np.flatnonzero(mask.any(axis=(1, 2))):
        gray = ((voxels[z] - lo) * scale).astype(np.uint8)
        rgb = np.repeat(gray[..., None], 3, axis=2)
        edge = mask[z] & ~ndimage.binary_erosion(mask[z])
        rgb[edge] = color
        path = out_dir / f"slice_{z:04d}.png"
        Image.fromarray(rgb).save(path)
        written.append(path)
    return written
