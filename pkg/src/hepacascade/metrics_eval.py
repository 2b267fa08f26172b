"""Dice metrics, lesion detection recall and k-fold splitting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cclabel import label


class CaseMismatchError(ValueError):
    pass


def _bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def dice(a, b) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = _bool(a), _bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


@dataclass
class EvalReport:
    per_case_dice: list[tuple[str, float]] = field(default_factory=list)
    dice_per_case: float = float("nan")
    dice_overall: float = float("nan")

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_case_dice"] = [{"case": c, "dice": v} for c, v in self.per_case_dice]
        return d


def evaluate(preds: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray]) -> EvalReport:
    """Per-case Dice, their mean, and Dice over all voxels pooled."""
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise CaseMismatchError(f"prediction and reference case ids differ: {missing}")
    if not preds:
        raise CaseMismatchError("no cases to evaluate")
    per_case = []
    inter = total = 0
    for cid in sorted(gts):
        p, g = _bool(preds[cid]), _bool(gts[cid])
        per_case.append((cid, dice(p, g)))
        inter += int(np.logical_and(p, g).sum())
        total += int(p.sum()) + int(g.sum())
    overall = 1.0 if total == 0 else 2.0 * inter / total
    return EvalReport(per_case, float(np.mean([d for _, d in per_case])), overall)


def component_recall(pred, gt_components_mask, connectivity="full") -> tuple[int, int]:
    """(hits, total): reference components that share at least one voxel with ``pred``."""
    pred = _bool(pred)
    labels, comps = label(gt_components_mask, connectivity)
    if not comps:
        return 0, 0
    hit_labels = np.unique(labels[pred & (labels > 0)])
    return int(hit_labels.size), len(comps)


def kfold_split(case_ids: Sequence[str], k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Shuffle ``case_ids`` with ``seed`` and cut into ``k`` near-equal test folds."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if not 2 <= k <= len(ids):
        raise ValueError(f"k must be in [2, {len(ids)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for i, test_idx in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append(([ids[t] for t in sorted(train_idx)], [ids[t] for t in sorted(test_idx)]))
    return out
