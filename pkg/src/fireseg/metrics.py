"""Pixel-level confusion accounting and the selection scores built on it.

Ratios with empty denominators come back as None rather than a silent 0,
so model selection can recognize (and reject) degenerate validation folds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import IGNORE_LABEL, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    """TP/FN/TN/FP pixel tallies; water/ignored pixels never enter them."""

    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp
        )

    @property
    def actual_fire(self) -> int:
        return self.tp + self.fn

    @property
    def actual_no_fire(self) -> int:
        return self.tn + self.fp


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray) -> ConfusionCounts:
    """Count pixel outcomes, skipping pixels whose true label is ignore (2)."""
    if pred_mask.shape != true_mask.shape:
        raise ShapeError(f"prediction {pred_mask.shape} and truth {true_mask.shape} differ")
    if true_mask.size and (true_mask.min() < 0 or true_mask.max() > 2):
        raise ValueError("true mask labels must be in {0,1,2}")
    valid = true_mask != IGNORE_LABEL
    fire = true_mask == 1
    pred_fire = pred_mask.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(valid & fire & pred_fire)),
        fn=int(np.sum(valid & fire & ~pred_fire)),
        tn=int(np.sum(valid & ~fire & ~pred_fire)),
        fp=int(np.sum(valid & ~fire & pred_fire)),
    )


def sensitivity(c: ConfusionCounts) -> float | None:
    """Recall of the fire class; None when there are no actual fire pixels."""
    if c.actual_fire == 0:
        return None
    return c.tp / c.actual_fire


def specificity(c: ConfusionCounts) -> float | None:
    """Recall of the no-fire class; None when there are no actual no-fire pixels."""
    if c.actual_no_fire == 0:
        return None
    return c.tn / c.actual_no_fire


def shybrid(l: float, sens: float, spec: float) -> float:
    """Model-selection score l * sensitivity + specificity.

    l = 1 balances the two recalls, l = 2 favors sensitivity.
    """
    if sens is None or spec is None:
        raise ValueError("shybrid is undefined for degenerate sensitivity/specificity")
    return l * sens + spec


def macro_average(counts: list[ConfusionCounts]) -> tuple[float | None, float | None]:
    """Mean of per-tile recalls (non-default alternative to pooled pixels).

    Tiles where a recall is undefined are skipped for that recall; returns
    None when no tile defines it.
    """
    sens_vals = [s for s in (sensitivity(c) for c in counts) if s is not None]
    spec_vals = [s for s in (specificity(c) for c in counts) if s is not None]
    return (
        sum(sens_vals) / len(sens_vals) if sens_vals else None,
        sum(spec_vals) / len(spec_vals) if spec_vals else None,
    )
