"""The ES-MoE block: expert bank, global gating, phased Top-K routing, aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import EsMoeConfig, Mode
from .tensor import (
    ConvParams,
    NonFiniteError,
    ShapeError,
    check_tensor,
    dwconv_backward,
    dwconv_forward,
    gap,
    pointwise_backward,
    pointwise_forward,
    silu,
    silu_backward,
    softmax,
    softmax_backward,
    uniform_init,
)

__all__ = [
    "RoutingModeError",
    "EvalCounter",
    "ExpertBank",
    "RoutingOutcome",
    "ForwardCache",
    "gate_logits",
    "route",
    "esmoe_forward",
    "esmoe_backward",
]

RMS_EPS = 1e-6


class RoutingModeError(RuntimeError):
    """An operation was called in the wrong routing mode."""


class EvalCounter:
    """Counts expert evaluations, one per (sample, expert) pair actually computed."""

    def __init__(self, n_experts: int):
        self.per_expert = np.zeros(n_experts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.per_expert.sum())

    def add(self, expert: int, n_samples: int) -> None:
        self.per_expert[expert] += n_samples

    def reset(self) -> None:
        self.per_expert[:] = 0

    def __repr__(self):
        return f"EvalCounter(total={self.total}, per_expert={self.per_expert.tolist()})"


@dataclass
class ExpertBank:
    """Parameters of every expert plus the two-layer gating network."""

    experts: list[ConvParams]
    gate_w1: np.ndarray  # (C_red, C_in)
    gate_b1: np.ndarray
    gate_w2: np.ndarray  # (E, C_red)
    gate_b2: np.ndarray

    @classmethod
    def init(cls, cfg: EsMoeConfig, rng: np.random.Generator | int | None = None, dtype=np.float32) -> "ExpertBank":
        rng = np.random.default_rng(rng)
        experts = [ConvParams.init(cfg.in_channels, cfg.out_channels, k, rng, dtype) for k in cfg.kernels]
        c_red = cfg.reduced_channels
        return cls(
            experts=experts,
            gate_w1=uniform_init((c_red, cfg.in_channels), cfg.in_channels, rng, dtype),
            gate_b1=uniform_init((c_red,), cfg.in_channels, rng, dtype),
            gate_w2=uniform_init((cfg.n_experts, c_red), c_red, rng, dtype),
            gate_b2=uniform_init((cfg.n_experts,), c_red, rng, dtype),
        )

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view; the arrays are shared, not copied."""
        out = {}
        for i, e in enumerate(self.experts):
            for name, arr in e.arrays().items():
                out[f"experts.{i}.{name}"] = arr
        out["gate.w1"] = self.gate_w1
        out["gate.b1"] = self.gate_b1
        out["gate.w2"] = self.gate_w2
        out["gate.b2"] = self.gate_b2
        return out

    @classmethod
    def from_named(cls, params: dict[str, np.ndarray], n_experts: int) -> "ExpertBank":
        experts = [
            ConvParams(
                dw_weight=params[f"experts.{i}.dw_weight"],
                dw_bias=params[f"experts.{i}.dw_bias"],
                pw_weight=params[f"experts.{i}.pw_weight"],
                pw_bias=params[f"experts.{i}.pw_bias"],
            )
            for i in range(n_experts)
        ]
        return cls(experts, params["gate.w1"], params["gate.b1"], params["gate.w2"], params["gate.b2"])

    def map(self, fn) -> "ExpertBank":
        return ExpertBank.from_named({k: fn(v) for k, v in self.named_parameters().items()}, self.n_experts)

    def copy(self) -> "ExpertBank":
        return self.map(np.copy)

    def astype(self, dtype) -> "ExpertBank":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "ExpertBank":
        return self.map(np.zeros_like)

    @property
    def gate_param_count(self) -> int:
        return self.gate_w1.size + self.gate_b1.size + self.gate_w2.size + self.gate_b2.size

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    @property
    def dtype(self) -> np.dtype:
        return self.gate_w1.dtype

    def check(self, cfg: EsMoeConfig) -> None:
        if self.n_experts != cfg.n_experts:
            raise ShapeError(f"bank has {self.n_experts} experts, config expects {cfg.n_experts}")
        for i, (e, k) in enumerate(zip(self.experts, cfg.kernels)):
            if e.kernel_size != k or e.in_channels != cfg.in_channels or e.out_channels != cfg.out_channels:
                raise ShapeError(
                    f"expert {i} is k={e.kernel_size}, {e.in_channels}->{e.out_channels}; "
                    f"config expects k={k}, {cfg.in_channels}->{cfg.out_channels}"
                )
        if self.gate_w1.shape != (cfg.reduced_channels, cfg.in_channels):
            raise ShapeError(f"gate_w1 shape {self.gate_w1.shape} does not match config")


@dataclass
class RoutingOutcome:
    """Everything the routing math produces for a batch of ``N`` samples."""

    logits: np.ndarray  # (N, E)
    probs: np.ndarray  # (N, E) softmax over all experts
    selected: np.ndarray  # (N, K) sorted expert indices
    weights: np.ndarray  # (N, E), exactly K nonzeros per row
    mask: np.ndarray  # (N, E) in {0, 1}
    mode: Mode = Mode.TRAINING

    def __len__(self):
        return self.logits.shape[0]


@dataclass
class _GateCache:
    pooled: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray


@dataclass
class ForwardCache:
    gate: _GateCache
    routing: RoutingOutcome
    expert_outputs: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    pre_norm: np.ndarray | None = None


def _check_input(x, cfg: EsMoeConfig) -> np.ndarray:
    x = check_tensor(x)
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    return x


def _gate(x: np.ndarray, bank: ExpertBank) -> tuple[np.ndarray, _GateCache]:
    pooled = gap(x)
    hidden_pre = pointwise_forward(pooled, bank.gate_w1, bank.gate_b1)
    hidden = silu(hidden_pre)
    logits = pointwise_forward(hidden, bank.gate_w2, bank.gate_b2)
    return logits[:, :, 0, 0], _GateCache(pooled, hidden_pre, hidden)


def gate_logits(x, bank: ExpertBank, cfg: EsMoeConfig) -> np.ndarray:
    """Expert logits ``(N, E)`` from pooled channel statistics of ``x``."""
    x = _check_input(x, cfg)
    return _gate(x, bank)[0]


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits per row, lowest index winning ties, sorted."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def route(logits, cfg: EsMoeConfig) -> RoutingOutcome:
    """Phased Top-K routing.

    Training mode masks the full softmax to the Top-K set and renormalises
    with an ``eps`` guard. Inference mode takes the softmax of the selected
    logits only. Both give exactly ``K`` nonzero weights per sample.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, E), got {logits.shape}")
    n, e = logits.shape
    if cfg.top_k > e:
        raise ShapeError(f"top_k={cfg.top_k} exceeds number of experts {e}")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("routing logits contain non-finite values")

    probs = softmax(logits, axis=1)
    selected = top_k_indices(logits, cfg.top_k)
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, selected, 1.0, axis=1)

    if cfg.mode is Mode.TRAINING:
        masked = probs * mask
        weights = masked / (masked.sum(axis=1, keepdims=True) + cfg.eps)
    else:
        sel_logits = np.take_along_axis(logits, selected, axis=1)
        weights = np.zeros_like(probs)
        np.put_along_axis(weights, selected, softmax(sel_logits, axis=1), axis=1)
    return RoutingOutcome(logits, probs, selected, weights, mask, cfg.mode)


def _rms_norm(y: np.ndarray) -> np.ndarray:
    return y / np.sqrt((y * y).mean(axis=(2, 3), keepdims=True) + RMS_EPS)


def _rms_norm_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    m = y.shape[2] * y.shape[3]
    r = np.sqrt((y * y).mean(axis=(2, 3), keepdims=True) + RMS_EPS)
    dot = (grad * y).sum(axis=(2, 3), keepdims=True)
    return grad / r - y * dot / (m * r**3)


def _forward(x, bank: ExpertBank, cfg: EsMoeConfig, counter: EvalCounter | None, keep: bool):
    x = _check_input(x, cfg)
    bank.check(cfg)
    dt = np.result_type(x.dtype, bank.dtype)
    logits, gcache = _gate(x, bank)
    routing = route(logits, cfg)
    cache = ForwardCache(gcache, routing)

    n, _, h, w = x.shape
    y = np.zeros((n, cfg.out_channels, h, w))
    for i, expert in enumerate(bank.experts):
        idx = np.flatnonzero(routing.mask[:, i])
        if idx.size == 0:
            continue
        xi = x[idx]
        yi, mid = dwconv_forward(xi, expert, return_mid=True)
        if counter is not None:
            counter.add(i, idx.size)
        y[idx] += routing.weights[idx, i, None, None, None] * yi
        if keep:
            cache.expert_outputs[i] = (idx, yi, mid)
    if cfg.rms_norm:
        cache.pre_norm = y
        y = _rms_norm(y)
    return y.astype(dt), routing, cache


def esmoe_forward(x, bank: ExpertBank, cfg: EsMoeConfig, counter: EvalCounter | None = None):
    """Run the block; returns ``(y, routing)``.

    Only the experts in each sample's Top-K set are evaluated, in either mode.
    Pass an :class:`EvalCounter` to observe how many evaluations happened.
    """
    y, routing, _ = _forward(x, bank, cfg, counter, keep=False)
    return y, routing


def esmoe_forward_cached(x, bank: ExpertBank, cfg: EsMoeConfig, counter: EvalCounter | None = None):
    """Like :func:`esmoe_forward` but also returns the cache used by the backward pass."""
    return _forward(x, bank, cfg, counter, keep=True)


def esmoe_backward(
    x,
    bank: ExpertBank,
    cfg: EsMoeConfig,
    grad_y,
    grad_weights=None,
    cache: ForwardCache | None = None,
):
    """Gradients of the block output w.r.t. ``x`` and every bank parameter.

    ``grad_weights`` is an optional extra upstream gradient on the routing
    weights ``(N, E)`` (the load-balancing path). The Top-K mask is a
    constant; gradients reach the gate through the full softmax.
    Returns ``(grad_x, grad_bank)``.
    """
    if cfg.mode is not Mode.TRAINING:
        raise RoutingModeError("backward requires Training mode routing")
    x = _check_input(x, cfg)
    if cache is None:
        _, _, cache = _forward(x, bank, cfg, None, keep=True)
    dt = np.result_type(x.dtype, bank.dtype)
    routing = cache.routing
    n, c, h, w = x.shape

    g = np.asarray(grad_y, dtype=np.float64)
    if g.shape != (n, cfg.out_channels, h, w):
        raise ShapeError(f"grad_y shape {g.shape} does not match output {(n, cfg.out_channels, h, w)}")
    if cfg.rms_norm:
        g = _rms_norm_backward(cache.pre_norm, g)

    grad_bank = bank.zeros_like()
    grad_x = np.zeros((n, c, h, w))
    g_weights = np.zeros_like(routing.weights)
    if grad_weights is not None:
        g_weights += np.asarray(grad_weights, dtype=np.float64)

    for i, expert in enumerate(bank.experts):
        if i not in cache.expert_outputs:
            continue
        idx, yi, mid = cache.expert_outputs[i]
        gi = g[idx]
        g_weights[idx, i] += np.einsum("nchw,nchw->n", gi, yi.astype(np.float64, copy=False))
        gx_i, gp = dwconv_backward(x[idx], expert, routing.weights[idx, i, None, None, None] * gi, mid=mid)
        grad_x[idx] += gx_i
        grad_bank.experts[i] = gp.astype(dt)

    # soft Top-K renormalisation: w = p*m / (sum(p*m) + eps)
    mask, probs, weights = routing.mask, routing.probs, routing.weights
    denom = (probs * mask).sum(axis=1, keepdims=True) + cfg.eps
    g_probs = mask * (g_weights - (g_weights * weights).sum(axis=1, keepdims=True)) / denom
    g_logits = softmax_backward(probs, g_probs, axis=1)[:, :, None, None]

    gc = cache.gate
    g_hidden, g_w2, g_b2 = pointwise_backward(gc.hidden, bank.gate_w2.astype(np.float64), g_logits)
    g_hidden_pre = silu_backward(gc.hidden_pre, g_hidden)
    g_pooled, g_w1, g_b1 = pointwise_backward(gc.pooled, bank.gate_w1.astype(np.float64), g_hidden_pre)
    grad_x += np.asarray(g_pooled, dtype=np.float64) / (h * w)

    grad_bank.gate_w1 = g_w1.astype(dt)
    grad_bank.gate_b1 = g_b1.astype(dt)
    grad_bank.gate_w2 = g_w2.astype(dt)
    grad_bank.gate_b2 = g_b2.astype(dt)
    return grad_x.astype(dt), grad_bank
