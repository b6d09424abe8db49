"""Attack and detection scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DomainError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict:
        return asdict(self)


def clean_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise DomainError("clean accuracy of an empty set")
    return float(np.mean(predictions == labels))


def attack_success_rate(predictions_on_triggered, target_label: int) -> float:
    """Fraction of triggered inputs predicted as the target; no filtering of the input."""
    predictions = np.asarray(predictions_on_triggered)
    if predictions.size == 0:
        raise DomainError("attack success rate of an empty set")
    return float(np.mean(predictions == target_label))


def confusion(flagged: Iterable[int], ground_truth_poison: Iterable[int], n_total: int) -> Confusion:
    flagged = set(int(i) for i in flagged)
    truth = set(int(i) for i in ground_truth_poison)
    for i in flagged | truth:
        if not 0 <= i < n_total:
            raise ShapeError(f"index {i} outside [0, {n_total})")
    tp = len(flagged & truth)
    fp = len(flagged - truth)
    fn = len(truth - flagged)
    return Confusion(tp, n_total - tp - fp - fn, fp, fn)


def detection_accuracy(c: Confusion) -> float:
    if c.total == 0:
        raise DomainError("detection accuracy needs at least one scored sample")
    return (c.tp + c.tn) / c.total


def f1(c: Confusion) -> Optional[float]:
    """2TP / (2TP + FP + FN), or None when there are no positives on either side."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return None
    return 2 * c.tp / denom
