"""Losses and the two-phase early-stopped training schedule."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .compnet_models import CompNet, CompNetOutputs, conv_kernels, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class EmptyDatasetError(TrainingError, ValueError):
    pass


class TrainingDivergedError(TrainingError):
    pass


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice_loss(pred, target, smooth: float = 1.0):
    """1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s), pooled over every element."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_shapes(pred, target)
    if smooth <= 0:
        raise ValueError("smooth must be positive")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def compnet_loss(
    outputs: CompNetOutputs,
    inputs,
    target,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    smooth: float = 1.0,
):
    """Weighted sum of segmentation Dice, complement Dice and reconstruction MSE."""
    seg, comp, recon = outputs
    inputs = torch.as_tensor(inputs)
    target = torch.as_tensor(target).to(seg.dtype)
    _check_shapes(seg, target)
    _check_shapes(comp, target)
    _check_shapes(recon, inputs)
    w_seg, w_comp, w_rec = weights
    total = seg.new_zeros(())
    if w_seg:
        total = total + w_seg * soft_dice_loss(seg, target, smooth)
    if w_comp:
        total = total + w_comp * soft_dice_loss(comp, 1.0 - target, smooth)
    if w_rec:
        total = total + w_rec * torch.mean((recon - inputs.to(recon.dtype)) ** 2)
    return total


def l2_penalty(model: torch.nn.Module, l2: float):
    """``l2`` times the sum of squared convolution kernel weights."""
    if l2 == 0:
        return torch.zeros(())
    return l2 * sum((w**2).sum() for w in conv_kernels(model))


@dataclass(frozen=True)
class TrainPhase:
    learning_rate: float
    patience: int | None = None
    max_epochs: int = 150
    min_delta: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.min_delta < 0:
            raise ValueError("min_delta must be non-negative")


@dataclass(frozen=True)
class TrainSchedule:
    phases: tuple[TrainPhase, ...]
    l2: float = 2e-4
    batch_size: int = 8
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    samples_per_epoch: int | None = None

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def liver(cls, **kw) -> "TrainSchedule":
        return cls(phases=(TrainPhase(5e-5, None, 40),), **kw)

    @classmethod
    def lesion(cls, **kw) -> "TrainSchedule":
        return cls(phases=(TrainPhase(5e-5, 5, 150), TrainPhase(1e-6, 10, 150)), **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrainSchedule":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        data["phases"] = tuple(TrainPhase(**p) for p in data["phases"])
        for key in ("loss_weights",):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainSchedule":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PhaseReport:
    learning_rate: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_seg_dice_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""


@dataclass
class TrainReport:
    phases: list[PhaseReport] = field(default_factory=list)
    best_checkpoint: str | None = None
    seconds: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def _as_batch(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).unsqueeze(1)


def _dice_from_sums(inter, psum, tsum, smooth):
    return 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth)


@torch.no_grad()
def evaluate_loss(model: CompNet, dataset, schedule: TrainSchedule, smooth: float = 1.0) -> tuple[float, float]:
    """Validation CompNet loss and its segmentation Dice term, eval mode.

    Dice sums are pooled over the whole set, so the result does not depend
    on how the set is batched.
    """
    x_all, y_all = dataset
    model.eval()
    seg = np.zeros(3)
    comp = np.zeros(3)
    sq_err = 0.0
    n_vox = 0
    for start in range(0, len(x_all), schedule.batch_size):
        x = _as_batch(x_all[start : start + schedule.batch_size]).double()
        y = _as_batch(y_all[start : start + schedule.batch_size]).double()
        out = model(x.float())
        p, c, r = out.seg.double(), out.comp.double(), out.recon.double()
        seg += [float((p * y).sum()), float(p.sum()), float(y.sum())]
        comp += [float((c * (1 - y)).sum()), float(c.sum()), float((1 - y).sum())]
        sq_err += float(((r - x) ** 2).sum())
        n_vox += x.numel()
    seg_loss = _dice_from_sums(*seg, smooth)
    comp_loss = _dice_from_sums(*comp, smooth)
    w_seg, w_comp, w_rec = schedule.loss_weights
    return float(w_seg * seg_loss + w_comp * comp_loss + w_rec * sq_err / n_vox), float(seg_loss)


def _check_dataset(dataset, name: str) -> None:
    x, y = dataset
    if len(x) == 0:
        raise EmptyDatasetError(f"{name} set is empty")
    if len(x) != len(y):
        raise ValueError(f"{name} set has {len(x)} inputs but {len(y)} targets")


def train(
    model: CompNet,
    train_set,
    val_set,
    schedule: TrainSchedule,
    checkpoint: str | Path | None = None,
) -> tuple[dict, TrainReport]:
    """Run every phase of ``schedule`` on ``model``, warm-starting each from the last.

    Datasets are ``(inputs, targets)`` array pairs shaped ``(N, *spatial)``.
    A phase ends when validation loss has not improved by more than
    ``min_delta`` for ``patience`` consecutive epochs, or at ``max_epochs``;
    the best-validation weights are then restored. Returns the final weights
    and a report of the loss curves.

    Turns on flush-to-zero for denormal floats (process-wide): L2 decay
    leaves many near-zero weights that otherwise slow CPU kernels badly.
    """
    _check_dataset(train_set, "training")
    _check_dataset(val_set, "validation")
    x_train, y_train = train_set
    n = len(x_train)
    per_epoch = min(n, schedule.samples_per_epoch or n)
    torch.set_flush_denormal(True)
    rng = np.random.default_rng(schedule.seed)
    torch.manual_seed(schedule.seed)
    report = TrainReport()
    started = time.perf_counter()

    for phase_idx, phase in enumerate(schedule.phases):
        pr = PhaseReport(phase.learning_rate)
        report.phases.append(pr)
        opt = torch.optim.Adam(model.parameters(), lr=phase.learning_rate)
        best_state = copy.deepcopy(model.state_dict())
        stale = 0
        for epoch in range(1, phase.max_epochs + 1):
            model.train()
            order = rng.permutation(n)[:per_epoch]
            running = 0.0
            for start in range(0, per_epoch, schedule.batch_size):
                idx = np.sort(order[start : start + schedule.batch_size])
                x = _as_batch(x_train[idx])
                y = _as_batch(y_train[idx])
                out = model(x)
                loss = compnet_loss(out, x, y, schedule.loss_weights)
                total = loss + l2_penalty(model, schedule.l2)
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss in phase {phase_idx + 1}, epoch {epoch}, batch at {start}"
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                running += float(loss.detach()) * len(idx)
            val, val_seg = evaluate_loss(model, val_set, schedule)
            if not math.isfinite(val):
                raise TrainingDivergedError(f"non-finite validation loss in phase {phase_idx + 1}, epoch {epoch}")
            pr.train_loss.append(running / per_epoch)
            pr.val_loss.append(val)
            pr.val_seg_dice_loss.append(val_seg)
            if val < pr.best_val_loss - phase.min_delta:
                pr.best_val_loss, pr.best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
            log.info(
                "phase %d epoch %d train %.4f val %.4f (seg %.4f)",
                phase_idx + 1, epoch, pr.train_loss[-1], val, val_seg,
            )
            if phase.patience is not None and stale >= phase.patience:
                pr.stop_reason = f"early stop: no improvement for {stale} epochs"
                break
        else:
            pr.stop_reason = "max epochs"
        model.load_state_dict(best_state)

    report.seconds = time.perf_counter() - started
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, extra={"report": report.to_json()})
        report.best_checkpoint = str(checkpoint)
    return model.state_dict(), report
