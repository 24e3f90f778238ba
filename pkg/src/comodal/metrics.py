"""Evaluation metrics and per-branch model selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "accuracy",
    "mae",
    "pearson",
    "acc7",
    "branch_metrics",
    "primary_metric",
    "MetricsRecord",
    "select_best",
]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.ravel(pred) - np.ravel(target))))


def pearson(pred: np.ndarray, target: np.ndarray) -> float:
    """Pearson correlation; 0.0 when either side is constant."""
    x = np.ravel(pred) - np.mean(pred)
    y = np.ravel(target) - np.mean(target)
    denom = np.sqrt(np.sum(x * x) * np.sum(y * y))
    return float(np.sum(x * y) / denom) if denom > 0 else 0.0


def acc7(pred: np.ndarray, target: np.ndarray) -> float:
    """Exact-match rate after rounding each side to the nearest integer in [-3, 3]."""
    p = np.clip(np.round(np.ravel(pred)), -3, 3)
    t = np.clip(np.round(np.ravel(target)), -3, 3)
    return float(np.mean(p == t))


def branch_metrics(pred: np.ndarray, targets: np.ndarray, task: str) -> dict[str, float]:
    if len(targets) == 0:
        raise ContractError("cannot evaluate an empty split")
    if task == "classification":
        return {"acc": accuracy(pred, targets)}
    return {"mae": mae(pred, targets), "corr": pearson(pred, targets), "acc_7": acc7(pred, targets)}


def primary_metric(task: str) -> tuple[str, bool]:
    """Name of the selection metric and whether larger is better."""
    return ("acc", True) if task == "classification" else ("mae", False)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    metrics: dict[str, dict[str, float]]  # branch -> metric -> value
    losses: dict[str, float] = field(default_factory=dict)

    def value(self, branch: str, metric: str) -> float:
        return self.metrics[branch][metric]


def select_best(records: Sequence[MetricsRecord], branch: str, task: str = "classification",
                split: str = "val") -> tuple[int, str]:
    """Epoch with the best validation metric for ``branch`` alone; ties go to the earlier epoch."""
    name, higher = primary_metric(task)
    candidates = [r for r in records if r.split == split and branch in r.metrics]
    if not candidates:
        raise ContractError(f"no {split} records for branch {branch!r}")
    best = candidates[0]
    for rec in candidates[1:]:
        a, b = rec.value(branch, name), best.value(branch, name)
        if (a > b) if higher else (a < b):
            best = rec
    return best.epoch, f"{branch}@epoch{best.epoch}"
