"""Load balancing, utilization statistics, routing entropy and the task loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .block import RoutingOutcome
from .tensor import NonFiniteError, ShapeError, softmax

__all__ = [
    "LB_WEIGHT_PRESETS",
    "UtilizationStats",
    "LossBreakdown",
    "utilization",
    "utilization_backward",
    "utilization_stats",
    "load_balance_loss",
    "load_balance_grad",
    "routing_entropy",
    "total_loss",
    "softmax_cross_entropy",
]

# weights studied in the loss-configuration ablation; 1.5 is the default
LB_WEIGHT_PRESETS = {"baseline": 0.5, "strong": 1.0, "default": 1.5}


@dataclass
class UtilizationStats:
    mu: np.ndarray
    entropy_bits: float


@dataclass
class LossBreakdown:
    task_loss: float
    lb_loss: float
    lb_weight: float
    total: float


def _weights_of(routing) -> np.ndarray:
    if isinstance(routing, RoutingOutcome):
        return routing.weights
    if isinstance(routing, (list, tuple)) and routing and isinstance(routing[0], RoutingOutcome):
        return np.concatenate([r.weights for r in routing], axis=0)
    return np.asarray(routing, dtype=np.float64)


def utilization(routing) -> np.ndarray:
    """Mean normalised routing mass per expert over the batch.

    Accepts a :class:`RoutingOutcome`, a list of them, or a raw ``(N, E)``
    weight array. Each row is divided by its own sum before averaging.
    """
    w = _weights_of(routing)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ShapeError(f"utilization needs a non-empty (N, E) batch, got shape {w.shape}")
    return (w / w.sum(axis=1, keepdims=True)).mean(axis=0)


def utilization_backward(weights, grad_mu) -> np.ndarray:
    """Gradient of :func:`utilization` w.r.t. the ``(N, E)`` weights."""
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad_mu, dtype=np.float64)[None, :]
    s = w.sum(axis=1, keepdims=True)
    return (g / s - (g * w).sum(axis=1, keepdims=True) / s**2) / w.shape[0]


def utilization_stats(routing) -> UtilizationStats:
    return UtilizationStats(mu=utilization(routing), entropy_bits=routing_entropy(routing))


def load_balance_loss(mu, n_experts: int | None = None) -> float:
    """``mean_i (mu_i - 1/E)^2``."""
    mu = np.asarray(mu, dtype=np.float64)
    e = mu.shape[0] if n_experts is None else n_experts
    if mu.ndim != 1 or mu.shape[0] != e:
        raise ShapeError(f"mu must be a vector of length {e}, got shape {mu.shape}")
    if not np.all(np.isfinite(mu)):
        raise NonFiniteError("mu contains non-finite values")
    return float(np.mean((mu - 1.0 / e) ** 2))


def load_balance_grad(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    e = mu.shape[0]
    return (2.0 / e) * (mu - 1.0 / e)


def routing_entropy(routing) -> float:
    """Mean per-sample Shannon entropy of the routing weights, in bits."""
    w = _weights_of(routing)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ShapeError(f"entropy needs a non-empty (N, E) batch, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("routing weights must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log2(np.where(w > 0, w, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1)))


def total_loss(task: float, lb: float, lb_weight: float = 1.5) -> LossBreakdown:
    task, lb, lb_weight = float(task), float(lb), float(lb_weight)
    if not all(math.isfinite(v) for v in (task, lb, lb_weight)):
        raise NonFiniteError(f"non-finite loss component: task={task}, lb={lb}, weight={lb_weight}")
    if lb_weight < 0:
        raise ValueError(f"load-balance weight must be >= 0, got {lb_weight}")
    return LossBreakdown(task, lb, lb_weight, task + lb_weight * lb)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` ``(N, n_classes)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
