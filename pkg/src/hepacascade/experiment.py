"""Train, predict and evaluate the cascade end to end, on phantoms or case folders."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cascade import CascadeConfig, CascadeModels, TorchPredictor, run_cascade
from .cclabel import label
from .compnet_models import CompNet, CompNet2DSpec, CompNet3DSpec
from .metrics_eval import component_recall, evaluate, kfold_split
from .phantom import Phantom, PhantomConfig, generate_many
from .preprocess import PreprocessConfig, normalize_equalize
from .sampler import Case, cube_arrays, lesion_slice_set, liver_slice_set, small_lesion_cubes
from .training import TrainReport, TrainSchedule, train
from .volume_io import CTVolume, MissingFileError, load_mask, load_volume, save_mask, save_volume

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def from_dict(cls, data: dict):
    """Build dataclass ``cls`` from ``data``, recursing into nested dataclasses.

    Unknown keys raise ``ConfigError``; lists become tuples.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, value in data.items():
        default = getattr(cls, name, None) if fields[name].default_factory is dataclasses.MISSING else fields[name].default_factory()
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            if isinstance(default, TrainSchedule):
                value = TrainSchedule.from_json(value)
            else:
                value = from_dict(type(default), value)
        elif isinstance(value, list):
            value = _tuples(value)
        kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _tuples(value):
    return tuple(_tuples(v) for v in value) if isinstance(value, list) else value


PHANTOM_LESION_PRIOR = 0.02


def _phantom_liver() -> CompNet2DSpec:
    return CompNet2DSpec(input_hw=(64, 64), block_widths=(8, 16, 32), transition_width=64)


def _phantom_large() -> CompNet2DSpec:
    return CompNet2DSpec(input_hw=(64, 64), block_widths=(16, 32, 64), transition_width=128, output_prior=PHANTOM_LESION_PRIOR)


def _phantom_small() -> CompNet3DSpec:
    return CompNet3DSpec(input_dhw=(16, 16, 16), block_widths=(8, 16, 32), transition_width=64, output_prior=PHANTOM_LESION_PRIOR)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to train the three networks and run the cascade."""

    spec_liver: CompNet2DSpec = field(default_factory=CompNet2DSpec)
    spec_large: CompNet2DSpec = field(default_factory=CompNet2DSpec)
    spec_small: CompNet3DSpec = field(default_factory=CompNet3DSpec)
    liver_schedule: TrainSchedule = field(default_factory=TrainSchedule.liver)
    large_schedule: TrainSchedule = field(default_factory=TrainSchedule.lesion)
    small_schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule.lesion(batch_size=16))
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    @classmethod
    def phantom(cls, **kw) -> "ExperimentConfig":
        """Scaled networks and geometry for 64^3 phantoms, same optimizer schedule.

        Lesion heads start at a small foreground prior so the sparse-target
        Dice loss does not spend its first epochs pushing every pixel down.
        """
        base = dict(
            spec_liver=_phantom_liver(),
            spec_large=_phantom_large(),
            spec_small=_phantom_small(),
            liver_schedule=TrainSchedule.liver(batch_size=2),
            large_schedule=TrainSchedule.lesion(batch_size=8),
            small_schedule=TrainSchedule.lesion(batch_size=2),
            cascade=CascadeConfig.scaled(64),
        )
        base.update(kw)
        return cls(**base)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        return from_dict(cls, data)


def prepare_case(case_id: str, volume, liver, lesions=None, cfg: PreprocessConfig = PreprocessConfig()) -> Case:
    return Case(case_id, normalize_equalize(volume, cfg), liver, lesions)


_SUFFIXES = (".raw", ".nii.gz", ".nii")


def find_file(directory, stem: str) -> Path | None:
    for suf in _SUFFIXES:
        p = Path(directory) / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def write_case(directory, volume: CTVolume, liver, lesions=None) -> Path:
    """Write ``ct``, ``liver`` and ``lesions`` raw files into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(volume, d / "ct.raw")
    save_mask(liver, volume, d / "liver.raw")
    if lesions is not None:
        save_mask(lesions, volume, d / "lesions.raw")
    return d


def case_dirs(root) -> list[Path]:
    """Sub-directories of ``root`` holding a ``ct`` volume, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"case directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and find_file(p, "ct"))


def load_cases(root, preprocess: PreprocessConfig | None = PreprocessConfig()) -> list[Case]:
    """Load every case folder under ``root``; intensities are preprocessed
    unless ``preprocess`` is None."""
    cases = []
    for d in case_dirs(root):
        volume = load_volume(find_file(d, "ct"))
        liver_path = find_file(d, "liver")
        if liver_path is None:
            raise MissingFileError(f"{d} has no liver mask")
        lesion_path = find_file(d, "lesions")
        lesions = load_mask(lesion_path) if lesion_path else None
        if preprocess is not None:
            volume = normalize_equalize(volume, preprocess)
        cases.append(Case(d.name, volume, load_mask(liver_path), lesions))
    if not cases:
        raise MissingFileError(f"no case folders under {root}")
    return cases


def split_validation(cases: Sequence[Case], fraction: float, seed: int) -> tuple[list[Case], list[Case]]:
    """Hold out ``ceil(fraction * n)`` whole cases (at least one) for validation."""
    if len(cases) < 2:
        raise ValueError("need at least two cases to carve out a validation split")
    n_val = min(len(cases) - 1, max(1, int(np.ceil(fraction * len(cases)))))
    order = np.random.default_rng(seed).permutation(len(cases))
    val_idx = set(order[:n_val].tolist())
    return [c for i, c in enumerate(cases) if i not in val_idx], [c for i, c in enumerate(cases) if i in val_idx]


def _seeded_model(spec, seed: int) -> CompNet:
    torch.manual_seed(seed)
    return CompNet(spec)


def _cubes(cases, cfg: CascadeConfig):
    samples = []
    for case in cases:
        samples += small_lesion_cubes(case, cfg.rule, cfg.cube_edge, cfg.slices_above, cfg.slices_below)
    return cube_arrays(samples)


@dataclass
class TrainedCascade:
    liver: CompNet
    large: CompNet
    small: CompNet | None
    reports: dict[str, TrainReport]

    def models(self, batch_size: int = 16) -> CascadeModels:
        small = TorchPredictor(self.small, batch_size) if self.small is not None else None
        return CascadeModels(TorchPredictor(self.liver, batch_size), TorchPredictor(self.large, batch_size), small)


def train_cascade(cases: Sequence[Case], cfg: ExperimentConfig, out_dir=None, which=("liver", "large", "small")) -> TrainedCascade:
    """Train the liver, large-lesion and small-lesion networks on ``cases``.

    A case-level validation split drives early stopping. With ``out_dir``
    each network's best weights are written as ``<name>.pt``.
    """
    train_cases, val_cases = split_validation(cases, cfg.val_fraction, cfg.seed)
    log.info("training on %d cases, validating on %s", len(train_cases), [c.case_id for c in val_cases])
    cc = cfg.cascade
    jobs = {
        "liver": (cfg.spec_liver, cfg.liver_schedule, liver_slice_set),
        "large": (cfg.spec_large, cfg.large_schedule, lambda cs: lesion_slice_set(cs, cc.rule)),
        "small": (cfg.spec_small, cfg.small_schedule, lambda cs: _cubes(cs, cc)),
    }
    nets: dict[str, CompNet | None] = {"small": None}
    reports = {}
    for offset, name in enumerate(which):
        spec, schedule, build = jobs[name]
        schedule = dataclasses.replace(schedule, seed=cfg.seed + offset)
        model = _seeded_model(spec, cfg.seed + offset)
        ckpt = Path(out_dir) / f"{name}.pt" if out_dir is not None else None
        log.info("training %s network", name)
        _, reports[name] = train(model, build(train_cases), build(val_cases), schedule, ckpt)
        nets[name] = model.eval()
    return TrainedCascade(nets.get("liver"), nets.get("large"), nets["small"], reports)


def small_lesion_reference(lesions, rule) -> np.ndarray:
    """Reference lesion components that are small on every slice they cross."""
    from .cclabel import filter_slices

    labels, comps = label(lesions, "full")
    small2d = filter_slices(lesions, rule, keep="small").astype(bool)
    keep = np.zeros(labels.shape, dtype=bool)
    for c in comps:
        region = labels == c.label
        if not (region & ~small2d).any():
            keep |= region
    return keep.astype(np.uint8)


@dataclass
class AblationResult:
    dice_per_case: float
    dice_overall: float
    dice_per_case_2d_only: float
    dice_overall_2d_only: float
    small_recall: float
    small_recall_2d_only: float
    small_hits: int
    small_hits_2d_only: int
    small_total: int
    per_case: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_cascade(cases: Sequence[Case], models: CascadeModels, cfg: CascadeConfig, min_small: int = 0) -> AblationResult:
    """Run the cascade with and without the small-lesion branch on ``cases``.

    Small-lesion recall only counts cases holding at least ``min_small``
    small reference components.
    """
    full, flat, gts = {}, {}, {}
    hits = hits_flat = total = 0
    per_case = []
    for case in cases:
        res = run_cascade(case.volume, models, cfg)
        res_flat = run_cascade(case.volume, models, dataclasses.replace(cfg, enable_small_branch=False))
        full[case.case_id], flat[case.case_id] = res.lesions, res_flat.lesions
        gts[case.case_id] = case.lesions
        ref = small_lesion_reference(case.lesions, cfg.rule)
        h, n = component_recall(res.lesions, ref)
        hf, _ = component_recall(res_flat.lesions, ref)
        counted = n >= min_small
        if counted:
            hits, hits_flat, total = hits + h, hits_flat + hf, total + n
        per_case.append({"case": case.case_id, "small_total": n, "small_hits": h, "small_hits_2d_only": hf, "counted": counted})
    rep, rep_flat = evaluate(full, gts), evaluate(flat, gts)
    for row, (_, d), (_, df) in zip(per_case, rep.per_case_dice, rep_flat.per_case_dice):
        row.update(dice=d, dice_2d_only=df)
    recall = hits / total if total else float("nan")
    recall_flat = hits_flat / total if total else float("nan")
    return AblationResult(
        rep.dice_per_case, rep.dice_overall, rep_flat.dice_per_case, rep_flat.dice_overall,
        recall, recall_flat, hits, hits_flat, total, per_case,
    )


@dataclass(frozen=True)
class PhantomExperimentConfig:
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(seed=7))
    n_phantoms: int = 25
    n_test: int = 5
    min_small: int = 3
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig.phantom)

    def __post_init__(self):
        if not 1 <= self.n_test < self.n_phantoms - 1:
            raise ValueError("need at least one test phantom and two training phantoms")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def phantom_cases(phantoms: Sequence[Phantom], cfg: PreprocessConfig = PreprocessConfig(), prefix: str = "phantom") -> list[Case]:
    return [prepare_case(f"{prefix}_{i:03d}", p.volume, p.liver, p.lesions, cfg) for i, p in enumerate(phantoms)]


def run_phantom_experiment(cfg: PhantomExperimentConfig = PhantomExperimentConfig(), out_dir=None) -> dict:
    """Generate phantoms, train on the first ones, evaluate the ablation on the rest."""
    started = time.perf_counter()
    phantoms = generate_many(cfg.n_phantoms, cfg.phantom)
    cases = phantom_cases(phantoms, cfg.experiment.preprocess)
    n_train = cfg.n_phantoms - cfg.n_test
    trained = train_cascade(cases[:n_train], cfg.experiment, out_dir)
    result = evaluate_cascade(cases[n_train:], trained.models(cfg.experiment.cascade.batch_size), cfg.experiment.cascade, cfg.min_small)
    out = {
        "config": cfg.to_json(),
        "result": result.to_json(),
        "training": {k: r.to_json() for k, r in trained.reports.items()},
        "seconds": time.perf_counter() - started,
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "experiment.json").write_text(json.dumps(out, indent=2))
    return out


def crossval(cases: Sequence[Case], cfg: ExperimentConfig, k: int = 2, seed: int = 0, out_dir=None) -> dict:
    """k-fold train/predict/evaluate by case; returns per-fold and pooled dice."""
    by_id = {c.case_id: c for c in cases}
    folds = []
    preds, gts = {}, {}
    for i, (train_ids, test_ids) in enumerate(kfold_split(list(by_id), k, seed)):
        fold_dir = Path(out_dir) / f"fold{i}" if out_dir is not None else None
        trained = train_cascade([by_id[c] for c in train_ids], cfg, fold_dir, _branches(cfg))
        models = trained.models(cfg.cascade.batch_size)
        fold_preds = {}
        for cid in test_ids:
            fold_preds[cid] = run_cascade(by_id[cid].volume, models, cfg.cascade).lesions
            gts[cid] = by_id[cid].lesions
        preds.update(fold_preds)
        rep = evaluate(fold_preds, {c: gts[c] for c in test_ids})
        folds.append({"fold": i, "train": train_ids, "test": test_ids, **rep.to_json()})
    total = evaluate(preds, gts)
    return {"folds": folds, "dice_per_case": total.dice_per_case, "dice_overall": total.dice_overall}


def _branches(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("liver", "large", "small") if cfg.cascade.enable_small_branch else ("liver", "large")
