"""Distillation objectives.

The soft target is a probability vector, the student contributes raw logits.
``ce_loss`` and ``kl_loss`` differ exactly by the entropy of the target, so
they share gradients; training minimizes ``ce_loss`` and reports both.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import NumericalOverflowError, ShapeError

BCE_EPS = 1e-7


def _check_pair(target_probs: torch.Tensor, student_logits: torch.Tensor) -> None:
    if target_probs.shape != student_logits.shape:
        raise ShapeError(
            f"target {tuple(target_probs.shape)} vs logits {tuple(student_logits.shape)}"
        )
    if target_probs.dim() != 2:
        raise ShapeError("expected (N, C) batches")


def _check_finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value):
        raise NumericalOverflowError(f"{name} is not finite: {value.item()!r}")
    return value


def ce_loss(target_probs: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the student against a soft target, mean over the batch."""
    _check_pair(target_probs, student_logits)
    log_q = F.log_softmax(student_logits, dim=1)
    value = -(target_probs * log_q).sum(dim=1).mean()
    return _check_finite(value, "ce_loss")


def kl_loss(target_probs: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL(target || student), mean over the batch. Zero-probability target terms drop out."""
    _check_pair(target_probs, student_logits)
    log_q = F.log_softmax(student_logits, dim=1)
    # xlogy gives p*log(p) = 0 at p = 0 without masking
    value = (torch.xlogy(target_probs, target_probs) - target_probs * log_q).sum(dim=1).mean()
    return _check_finite(value, "kl_loss")


def teacher_entropy(target_probs: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of the soft targets: the constant gap between CE and KL."""
    if target_probs.dim() != 2:
        raise ShapeError("expected (N, C) probabilities")
    return -torch.xlogy(target_probs, target_probs).sum(dim=1).mean()


def bce_loss(labels: torch.Tensor, probs: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy on probabilities, clamped to [eps, 1-eps] before the log.

    The clamp caps the loss near -log(eps) instead of diverging when a
    probability saturates; eps=1e-7 keeps float32 log() exact enough that
    unclamped inputs are unaffected.
    """
    if labels.shape != probs.shape:
        raise ShapeError(f"labels {tuple(labels.shape)} vs probs {tuple(probs.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    value = -(torch.xlogy(labels, p) + torch.xlogy(1.0 - labels, 1.0 - p)).mean()
    return _check_finite(value, "bce_loss")


def hard_label_ce(labels: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Standard cross-entropy against integer class labels."""
    if labels.dim() != 1 or student_logits.dim() != 2:
        raise ShapeError("expected (N,) labels and (N, C) logits")
    if labels.size(0) != student_logits.size(0):
        raise ShapeError("labels and logits disagree on N")
    if labels.numel() and (labels.min() < 0 or labels.max() >= student_logits.size(1)):
        raise ShapeError("label index out of range for logits width")
    return _check_finite(F.cross_entropy(student_logits, labels), "hard_label_ce")


def multilabel_sigmoid_ce(targets: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean per-element BCE on sigmoid(logits); equals bce_loss when C == 1."""
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {tuple(targets.shape)} vs logits {tuple(logits.shape)}")
    return bce_loss(targets, torch.sigmoid(logits))
