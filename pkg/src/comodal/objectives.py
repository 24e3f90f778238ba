"""Task losses, knowledge-transfer losses and their weighted combination.

Teacher-side inputs (multimodal logits, features, attention maps) are always
detached inside the KT losses, so knowledge transfer can only update the
student.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .config import LossWeights
from .errors import CapabilityError, ContractError, ShapeError
from .model import BranchOutputs
from .nn import Linear, Module
from .tensor import Tensor

__all__ = [
    "EPS",
    "KT_MODES",
    "task_loss_classification",
    "task_loss_regression",
    "task_loss",
    "kt_decision",
    "kt_feature",
    "kt_attention",
    "KtProjectors",
    "total_loss",
]

EPS = 1e-8
KT_MODES = ("decision", "feature", "attention", "none")


def task_loss_classification(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` [B, C]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes or not np.all(labels == np.round(labels))):
        raise ContractError(f"labels must be integers in [0, {n_classes})")
    onehot = Tensor(np.eye(n_classes)[labels.astype(np.int64)])
    logp = T.log_softmax_t(logits, axis=-1, temperature=1.0)
    return -(logp * onehot).sum(axis=-1).mean()


def task_loss_regression(pred: Tensor, target) -> Tensor:
    """Mean absolute error between ``pred`` [B, 1] and ``target`` [B]."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape not in ((len(target), 1), (len(target),)):
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return (pred - Tensor(target.reshape(pred.shape))).abs().mean()


def task_loss(pred: Tensor, targets, kind: str) -> Tensor:
    if kind == "classification":
        return task_loss_classification(pred, targets)
    return task_loss_regression(pred, targets)


def kt_decision(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """``T^2 * mean_b KL(softmax(teacher/T) || softmax(student/T))``."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"student logits {student_logits.shape} vs teacher {teacher_logits.shape}")
    teacher = T.detach(teacher_logits)
    log_t = T.log_softmax_t(teacher, axis=-1, temperature=temperature)
    p_t = Tensor(np.exp(log_t.data))
    log_s = T.log_softmax_t(student_logits, axis=-1, temperature=temperature)
    kl = (p_t * (log_t - log_s)).sum(axis=-1)
    return kl.mean() * (temperature * temperature)


def kt_feature(student_feat: Tensor, teacher_feat: Tensor, projector: Linear | None = None) -> Tensor:
    """``mean_b (1 - cos(projector(student), teacher))``; in [0, 2]."""
    s = projector(student_feat) if projector is not None else student_feat
    if s.shape != teacher_feat.shape:
        raise ShapeError(f"projected student features {s.shape} vs teacher {teacher_feat.shape}")
    t = T.detach(teacher_feat)
    dot = (s * t).sum(axis=-1)
    s_norm = T.clamp_min((s * s).sum(axis=-1).sqrt(), EPS)
    t_norm = Tensor(np.maximum(np.sqrt((t.data * t.data).sum(axis=-1)), EPS))
    cos = dot / (s_norm * t_norm)
    return (1.0 - cos).mean()


def kt_attention(student_probs: Tensor | None, teacher_probs: Tensor | None) -> Tensor:
    """Mean over rows (heads, batch) of ``KL(teacher_row || student_row)`` with eps-clamped logs."""
    if student_probs is None:
        raise CapabilityError("attention-level KT needs a student branch with a self-attention tail")
    if teacher_probs is None:
        raise CapabilityError("attention-level KT needs multimodal self-attention blocks (self_depth >= 1)")
    if student_probs.shape != teacher_probs.shape:
        raise ShapeError(f"student attention {student_probs.shape} vs teacher {teacher_probs.shape}")
    t = T.detach(teacher_probs)
    log_t = Tensor(np.log(np.maximum(t.data, EPS)))
    log_s = T.clamp_min(student_probs, EPS).log()
    kl = (t * (log_t - log_s)).sum(axis=-1)
    return kl.mean()


class KtProjectors(Module):
    """Student-side maps from unimodal feature width to the multimodal feature width.

    Used only by feature-level KT and discarded at extraction.
    """

    def __init__(self, widths: Mapping[str, int], teacher_width: int) -> None:
        super().__init__()
        self.maps = {m: Linear(w, teacher_width) for m, w in widths.items()}

    def __getitem__(self, modality: str) -> Linear:
        return self.maps[modality]


def total_loss(outputs: BranchOutputs, targets, w: LossWeights, mode: str | None = None,
               task: str = "classification",
               projectors: KtProjectors | None = None,
               teacher: BranchOutputs | None = None) -> tuple[Tensor, dict[str, float]]:
    """``alpha * sum_i KT_i + beta * sum_i task_i + gamma * task_mm`` and a per-term breakdown.

    Terms with a zero weight are not built at all; KT and the multimodal task
    term are also skipped when the outputs carry no multimodal prediction.
    ``teacher`` optionally supplies the multimodal side of the KT terms from a
    different forward pass (the default is ``outputs`` itself); since the
    teacher is detached either way, gradients are unchanged when both passes
    agree.
    """
    mode = w.kt_mode if mode is None else mode
    if mode not in KT_MODES:
        raise ContractError(f"unknown KT mode {mode!r}")
    breakdown: dict[str, float] = {}
    groups: list[Tensor] = []
    has_mm = outputs.mm_pred is not None

    src = outputs if teacher is None else teacher
    if w.alpha > 0 and mode != "none" and has_mm:
        if src.mm_pred is None:
            raise ContractError("teacher outputs carry no multimodal prediction")
        kt = []
        for m in outputs.uni_pred:
            if mode == "decision":
                if task != "classification":
                    raise CapabilityError("decision-level KT needs a classification task")
                term = kt_decision(outputs.kt_pred[m], src.mm_pred, w.temperature)
            elif mode == "feature":
                if projectors is None and outputs.kt_feat[m].shape != src.mm_feat.shape:
                    raise ShapeError(f"feature KT for {m}: widths differ and no projector given")
                term = kt_feature(outputs.kt_feat[m], src.mm_feat,
                                  projectors[m] if projectors is not None else None)
            else:
                term = kt_attention(outputs.kt_attn.get(m), src.mm_attn.get(m))
            breakdown[f"kt/{m}"] = term.item()
            kt.append(term)
        group = _sum(kt) * w.alpha
        breakdown["weighted/kt"] = group.item()
        groups.append(group)

    if w.beta > 0:
        tasks = []
        for m, pred in outputs.uni_pred.items():
            term = task_loss(pred, targets, task)
            breakdown[f"task/{m}"] = term.item()
            tasks.append(term)
        group = _sum(tasks) * w.beta
        breakdown["weighted/task"] = group.item()
        groups.append(group)

    if w.gamma > 0 and has_mm:
        term = task_loss(outputs.mm_pred, targets, task)
        breakdown["task/mm"] = term.item()
        group = term * w.gamma
        breakdown["weighted/mm"] = group.item()
        groups.append(group)

    if not groups:
        raise ContractError("every loss term is disabled (check alpha/beta/gamma and mode)")
    total = _sum(groups)
    breakdown["total"] = total.item()
    return total, breakdown


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
