"""Synthetic CT-like liver phantoms with known liver and lesion masks.

Each phantom is an ellipsoidal liver in a soft-tissue background, with
spherical lesions fully inside the liver and thin oblique vessels whose
in-plane position drifts by at least two voxels per slice. Lesions stay put
from slice to slice; vessels do not.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cclabel import Component, SizeRule, is_small, label
from .volume_io import CTVolume


class PhantomPlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    liver_axes: tuple[tuple[float, float], ...] = ((18.0, 23.0), (17.0, 22.0), (19.0, 24.0))
    liver_center_jitter: float = 3.0
    n_large_lesions: tuple[int, int] = (1, 3)
    n_small_lesions: tuple[int, int] = (3, 6)
    n_vessels: tuple[int, int] = (2, 4)
    large_radius: tuple[float, float] | None = None
    small_radius: tuple[float, float] | None = None
    vessel_radius: tuple[float, float] = (1.0, 1.6)
    vessel_drift: tuple[float, float] = (2.0, 3.0)
    background_hu: float = -100.0
    liver_hu: float = 60.0
    lesion_hu: float = 30.0
    vessel_hu: float = 55.0
    noise_sigma: float = 10.0
    size_threshold: int | None = None
    seed: int = 0
    max_retries: int = 500

    @property
    def threshold(self) -> int:
        """Lesion size threshold scaled from 32 at 512 pixels in-plane."""
        if self.size_threshold is not None:
            return self.size_threshold
        return max(1, round(32 * self.shape[-1] / 512))

    @property
    def small_radii(self) -> tuple[float, float]:
        # a ball of radius < T/2 spans at most T voxels per axis
        t = self.threshold
        return self.small_radius or (0.35 * t, 0.48 * t)

    @property
    def large_radii(self) -> tuple[float, float]:
        t = self.threshold
        return self.large_radius or (1.0 * t, 1.75 * t)

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom shape must be 3D with every side >= 8, got {self.shape}")
        if self.small_radii[1] >= self.threshold / 2:
            raise ValueError("small lesion radius must stay below half the size threshold")
        if 2 * self.large_radii[0] <= self.threshold:
            raise ValueError("large lesion radius must exceed half the size threshold")
        for lo, hi in (self.n_large_lesions, self.n_small_lesions, self.n_vessels):
            if not 0 <= lo <= hi:
                raise ValueError("count ranges must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class PhantomLesion:
    center: tuple[float, float, float]
    radius: float
    tag: str
    component: Component


@dataclass(frozen=True, eq=False)
class Phantom:
    volume: CTVolume
    liver: np.ndarray
    lesions: np.ndarray
    lesion_list: list[PhantomLesion] = field(default_factory=list)

    @property
    def n_small(self) -> int:
        return sum(l.tag == "small" for l in self.lesion_list)


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _ball(shape, center, radius) -> np.ndarray:
    zz, yy, xx = _grid(shape)
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return d2 <= radius**2


def generate(cfg: PhantomConfig = PhantomConfig()) -> Phantom:
    """Render one phantom; identical configs give bit-identical output."""
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.shape
    zz, yy, xx = _grid(shape)

    mid = np.array([(n - 1) / 2 for n in shape])
    center = mid + rng.uniform(-cfg.liver_center_jitter, cfg.liver_center_jitter, 3)
    axes = np.array([rng.uniform(lo, hi) for lo, hi in cfg.liver_axes])
    axes = np.minimum(axes, mid - 1)
    r2 = ((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 + ((xx - center[2]) / axes[2]) ** 2
    liver = r2 <= 1.0

    n_large = int(rng.integers(cfg.n_large_lesions[0], cfg.n_large_lesions[1] + 1))
    n_small = int(rng.integers(cfg.n_small_lesions[0], cfg.n_small_lesions[1] + 1))
    wanted = [("large", *cfg.large_radii)] * n_large + [("small", *cfg.small_radii)] * n_small

    placed: list[tuple[np.ndarray, float, str]] = []
    for tag, rlo, rhi in wanted:
        for _ in range(cfg.max_retries):
            radius = float(rng.uniform(rlo, rhi))
            # rejection-sample a center whose padded ball stays inside the ellipsoid
            c = center + rng.uniform(-1, 1, 3) * axes
            pad = radius + 2.0
            if np.sum(((c - center) / np.maximum(axes - pad, 1e-6)) ** 2) > 1.0 or np.any(axes <= pad):
                continue
            if any(np.linalg.norm(c - pc) < radius + pr + 2.5 for pc, pr, _ in placed):
                continue
            placed.append((c, radius, tag))
            break
        else:
            raise PhantomPlacementError(f"could not place a {tag} lesion after {cfg.max_retries} tries")

    lesions = np.zeros(shape, dtype=bool)
    for c, radius, _ in placed:
        lesions |= _ball(shape, c, radius)

    vessels = np.zeros(shape, dtype=bool)
    n_vessels = int(rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1))
    for _ in range(n_vessels):
        z0 = rng.uniform(center[0] - axes[0] / 2, center[0] + axes[0] / 2)
        p0 = center[1:] + rng.uniform(-0.5, 0.5, 2) * axes[1:]
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*cfg.vessel_drift)
        v = speed * np.array([np.cos(angle), np.sin(angle)])
        radius = rng.uniform(*cfg.vessel_radius)
        cy = p0[0] + v[0] * (zz - z0)
        cx = p0[1] + v[1] * (zz - z0)
        vessels |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    vessels &= liver & ~lesions

    img = np.full(shape, cfg.background_hu, dtype=np.float64)
    img[liver] = cfg.liver_hu
    img[vessels] = cfg.vessel_hu
    img[lesions] = cfg.lesion_hu
    img += rng.normal(0.0, cfg.noise_sigma, shape)

    if np.any(lesions & ~liver):
        raise PhantomPlacementError("lesion voxels fall outside the liver")

    labels, comps = label(lesions, "full")
    if len(comps) != len(placed):
        raise PhantomPlacementError(f"{len(placed)} lesions rendered as {len(comps)} components")
    rule = SizeRule(cfg.threshold)
    lesion_list = []
    for c, radius, tag in placed:
        idx = tuple(int(round(x)) for x in c)
        comp = comps[labels[idx] - 1]
        actual = "small" if is_small(comp, rule) else "large"
        if actual != tag:
            raise PhantomPlacementError(f"lesion tagged {tag} renders as {actual}")
        lesion_list.append(PhantomLesion(tuple(float(x) for x in c), radius, tag, comp))

    return Phantom(
        CTVolume(img.astype(np.float32)),
        liver.astype(np.uint8),
        lesions.astype(np.uint8),
        lesion_list,
    )


def generate_many(n: int, cfg: PhantomConfig = PhantomConfig()) -> list[Phantom]:
    """``n`` phantoms with per-case seeds derived from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(n)
    return [generate(replace(cfg, seed=int(s))) for s in seeds]
