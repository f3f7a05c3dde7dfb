"""Training objective: cross entropy, budget loss and a soft rank penalty.

The total objective over the prunable masks ``m_l`` is

    ce + lambda * (sum_l sum(m_l) - c)**2 + beta * sum_l rank(m_l)

with ``rank(m) = sum_j (1 - exp(-gamma colsum_j)) + sum_i (1 - exp(-gamma rowsum_i))``,
a differentiable count of the non-empty rows and columns of ``m``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParameterError
from .tensor_core import as_matrix

__all__ = [
    "LossWeights",
    "AnnealSchedule",
    "cross_entropy",
    "budget_loss",
    "surrogate_rank",
    "total_loss",
    "rate_to_cost",
]


@dataclass
class LossWeights:
    """Weights of the budget and rank terms and the surviving-weight target."""

    lambda_: float = 1000.0
    beta: float = 0.1
    target_cost: float = 0.0

    def __post_init__(self):
        if self.lambda_ < 0 or self.beta < 0 or self.target_cost < 0:
            raise ParameterError("loss weights and target cost must be non-negative")


@dataclass
class AnnealSchedule:
    """Monotone interpolation from `start` to `end` over `total_steps`.

    Steps past `total_steps` stay at `end`.
    """

    start: float
    end: float
    total_steps: int
    shape: str = "exponential"

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0):
            raise ParameterError("schedule endpoints must be positive")
        if int(self.total_steps) < 1:
            raise ParameterError("total_steps must be a positive integer")
        if self.shape not in ("linear", "exponential"):
            raise ParameterError(f"unknown schedule shape {self.shape!r}")
        self.total_steps = int(self.total_steps)

    def value(self, step):
        if step <= 0:
            return float(self.start)
        if step >= self.total_steps:
            return float(self.end)
        frac = step / self.total_steps
        if self.shape == "linear":
            v = self.start + frac * (self.end - self.start)
        else:
            v = self.start * math.exp(frac * math.log(self.end / self.start))
        lo, hi = min(self.start, self.end), max(self.start, self.end)
        return float(min(max(v, lo), hi))


def rate_to_cost(rate, total_entries):
    """Number of surviving weights for a pruning rate (fraction removed)."""
    if not 0 <= rate < 1:
        raise ParameterError(f"pruning rate must lie in [0, 1), got {rate}")
    return (1.0 - rate) * total_entries


def cross_entropy(logits, labels):
    """Mean softmax cross entropy and its gradient with respect to the logits."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.size != n:
        raise DomainError(f"{labels.size} labels for {n} logit rows")
    if (labels < 0).any() or (labels >= k).any():
        raise DomainError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def budget_loss(masks, c):
    """Squared gap between the total mask mass and the target count `c`."""
    total = float(sum(np.sum(m) for m in masks))
    gap = total - c
    grads = [np.full(np.shape(m), 2.0 * gap) for m in masks]
    return gap * gap, grads


def surrogate_rank(mask, gamma):
    """Soft count of the non-empty rows plus non-empty columns of `mask`."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    mask = as_matrix(mask, "mask")
    col_decay = np.exp(-gamma * mask.sum(axis=0, keepdims=True))
    row_decay = np.exp(-gamma * mask.sum(axis=1, keepdims=True))
    loss = float((1.0 - col_decay).sum() + (1.0 - row_decay).sum())
    grad = gamma * col_decay + gamma * row_decay
    return loss, grad


def total_loss(ce, masks, weights, gamma):
    """Combine cross entropy with the weighted budget and rank terms.

    Returns the scalar objective, the per-mask gradients of the budget and
    rank terms, and a dict with the unweighted components. The cross
    entropy part of the mask gradient flows through the network and is
    not included here.
    """
    budget, b_grads = budget_loss(masks, weights.target_cost)
    rank_total = 0.0
    grads = []
    for m, bg in zip(masks, b_grads):
        r, rg = surrogate_rank(m, gamma)
        rank_total += r
        grads.append(weights.lambda_ * bg + weights.beta * rg)
    loss = ce + weights.lambda_ * budget + weights.beta * rank_total
    parts = {"ce": ce, "budget": budget, "rank": rank_total}
    return loss, grads, parts
