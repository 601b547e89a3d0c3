"""Confusion counts, accuracy and F1 for the binary ON/OFF task.

Counts always treat ON as the positive class; ``flipped()`` gives the OFF-positive view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def error_rate(self) -> float:
        return (self.fp + self.fn) / self.total if self.total else 0.0

    @property
    def f1(self) -> float:
        # precision is undefined without true positives; F1 is 0 then
        if self.tp == 0:
            return 0.0
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)

    def flipped(self) -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    def f1_for(self, positive_on: bool = True) -> float:
        return self.f1 if positive_on else self.flipped().f1

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(predictions, labels) -> ConfusionCounts:
    p = np.asarray(predictions, dtype=bool).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} labels")
    return ConfusionCounts(int(np.sum(p & y)), int(np.sum(p & ~y)),
                           int(np.sum(~p & ~y)), int(np.sum(~p & y)))


def compute_metrics(predictions, labels, positive_on: bool = True) -> tuple[ConfusionCounts, float, float]:
    c = confusion(predictions, labels)
    if c.total == 0:
        raise ValueError("no predictions to score")
    return c, c.accuracy, c.f1_for(positive_on)


def fault_flag(predicted, expected) -> bool:
    """A lamp is flagged when the observed state disagrees with the schedule."""
    return bool(predicted) != bool(expected)
