"""Noisy label refinement: robust focal loss, EMA confidence weight, answer adjustment.

Only the training loop calls into this module. ``CALLS`` counts entries so
tests can assert that inference never touches it.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

CALLS: Counter = Counter()

LOG_FLOOR = -4.0


def _clipped_log(a, floor):
    if isinstance(a, torch.Tensor):
        return torch.log(a.clamp_min(np.exp(floor))).clamp(floor, 0.0)
    with np.errstate(divide="ignore"):
        return np.clip(np.log(a), floor, 0.0)


def rfl_loss(logits: torch.Tensor, target: torch.Tensor, gamma=1.0, floor=LOG_FLOOR,
             reverse=True, reduction="mean"):
    """Focal cross-entropy plus reverse cross-entropy with log(0) clipped to ``floor``.

    ``logits`` are pre-softmax scores of shape (..., L); ``target`` is a one-hot or
    soft label of the same shape.
    """
    CALLS["rfl_loss"] += 1
    logp = torch.log_softmax(logits, dim=-1)
    p = logp.exp()
    loss = -(target * (1.0 - p) ** gamma * logp).sum(-1)
    if reverse:
        loss = loss - (p * _clipped_log(target, floor)).sum(-1)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, reduction="mean"):
    loss = -(target * torch.log_softmax(logits, dim=-1)).sum(-1)
    return loss.mean() if reduction == "mean" else loss


def rfl_loss_and_grad(logits, a, gamma=1.0, floor=LOG_FLOOR, reverse=True):
    """Single-sample RFL value and its exact gradient w.r.t. the logits (float64)."""
    z = np.asarray(logits, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z) / np.exp(z).sum()
    logp = np.log(p)
    c = _clipped_log(a, floor) if reverse else np.zeros_like(p)
    loss = -np.sum(a * (1 - p) ** gamma * logp) - np.sum(p * c)
    # dL/dp, then chain through the softmax Jacobian
    focal = (1 - p) ** gamma / p
    if gamma != 0:
        focal = focal - gamma * (1 - p) ** (gamma - 1) * logp
    g = -a * focal - c
    grad = p * (g - np.dot(g, p))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite RFL loss")
    return float(loss), grad


@dataclass
class EmaWeight:
    tau: float = 0.99
    w: float = 0.0
    initialized: bool = False

    def update(self, confidences) -> "EmaWeight":
        CALLS["update_weight"] += 1
        conf = np.asarray(confidences, dtype=np.float64).ravel()
        if conf.size == 0:
            raise ValueError("empty batch")
        if conf.min() < 0 or conf.max() > 1:
            raise ValueError("confidences must lie in [0, 1]")
        mean = float(conf.mean())
        if not self.initialized:
            return EmaWeight(self.tau, mean, True)
        return EmaWeight(self.tau, self.tau * self.w + (1 - self.tau) * mean, True)


def update_weight(state: EmaWeight, batch_confidences) -> EmaWeight:
    return state.update(batch_confidences)


def adjust_answer(p_hat, a, w):
    """Keep ``a`` where the proto-answer argmax agrees with it, else mix ``w*p_hat + (1-w)*a``.

    Works on single vectors or on batches (last axis = classes), numpy or torch.
    """
    CALLS["adjust_answer"] += 1
    if not 0.0 <= float(w) <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    if isinstance(p_hat, torch.Tensor):
        agree = (p_hat.argmax(-1) == a.argmax(-1)).unsqueeze(-1)
        return torch.where(agree, a, w * p_hat + (1 - w) * a)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    agree = (p_hat.argmax(-1) == a.argmax(-1))[..., None]
    return np.where(agree, a, w * p_hat + (1 - w) * a)
