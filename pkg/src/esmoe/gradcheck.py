"""Central finite-difference checks for every backward pass, run in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import ExpertBank, esmoe_backward, esmoe_forward, gate_logits
from .config import EsMoeConfig, Mode
from .estimator import init_head, model_loss, model_loss_and_grads
from .losses import load_balance_grad, load_balance_loss, softmax_cross_entropy, utilization, utilization_backward
from .tensor import (
    ConvParams,
    dwconv_backward,
    dwconv_forward,
    gap,
    gap_backward,
    pointwise_backward,
    pointwise_forward,
    silu,
    silu_backward,
    softmax,
    softmax_backward,
)

STEP = 1e-4
TOLERANCE = 1e-3
FLOOR = 1e-6
MIN_LOGIT_GAP = 1e-2

__all__ = ["GradCheckResult", "rel_error", "numeric_grad", "run_suite", "STEP", "TOLERANCE", "FLOOR"]


@dataclass
class GradCheckResult:
    name: str
    worst: float
    n_checked: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance)


def rel_error(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros(arr.shape)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _compare(name, pairs) -> GradCheckResult:
    worst, count = 0.0, 0
    for analytic, numeric in pairs:
        err = rel_error(analytic, numeric)
        worst = max(worst, float(err.max(initial=0.0)))
        count += err.size
    return GradCheckResult(name, worst, count)


def _with_gaps(rng, draw, logits_of, tries: int = 1000):
    """Redraw until every sample's logits are pairwise more than ``MIN_LOGIT_GAP`` apart."""
    for _ in range(tries):
        sample = draw()
        z = np.sort(logits_of(sample), axis=1)
        if np.all(np.diff(z, axis=1) > MIN_LOGIT_GAP):
            return sample
    raise RuntimeError("could not draw inputs with separated logits")


def _check_dwconv(rng, c_in, c_out, k, size) -> GradCheckResult:
    x = rng.standard_normal((2, c_in, size, size))
    p = ConvParams.init(c_in, c_out, k, rng, np.float64)
    r = rng.standard_normal((2, c_out, size, size))
    f = lambda: float((dwconv_forward(x, p) * r).sum())
    gx, gp = dwconv_backward(x, p, r)
    pairs = [(gx, numeric_grad(f, x))]
    pairs += [(getattr(gp, name), numeric_grad(f, arr)) for name, arr in p.arrays().items()]
    return _compare(f"dwconv k={k}", pairs)


def _check_pointwise(rng, c_in, c_out, size) -> GradCheckResult:
    x = rng.standard_normal((2, c_in, size, size))
    w = rng.standard_normal((c_out, c_in))
    b = rng.standard_normal(c_out)
    r = rng.standard_normal((2, c_out, size, size))
    f = lambda: float((pointwise_forward(x, w, b) * r).sum())
    gx, gw, gb = pointwise_backward(x, w, r)
    return _compare("pointwise", [(gx, numeric_grad(f, x)), (gw, numeric_grad(f, w)), (gb, numeric_grad(f, b))])


def _check_elementwise(rng) -> list[GradCheckResult]:
    x = rng.standard_normal((3, 6, 4, 4))
    x[np.abs(x) < 1e-2] += 0.1
    r = rng.standard_normal(x.shape)
    out = [_compare("silu", [(silu_backward(x, r), numeric_grad(lambda: float((silu(x) * r).sum()), x))])]

    z = rng.standard_normal((5, 4))
    rz = rng.standard_normal(z.shape)
    g = softmax_backward(softmax(z, axis=1), rz, axis=1)
    out.append(_compare("softmax", [(g, numeric_grad(lambda: float((softmax(z, axis=1) * rz).sum()), z))]))

    rg = rng.standard_normal((3, 6, 1, 1))
    out.append(_compare("gap", [(gap_backward(rg, x.shape), numeric_grad(lambda: float((gap(x) * rg).sum()), x))]))
    return out


def _check_losses(rng) -> list[GradCheckResult]:
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    _, g = softmax_cross_entropy(logits, labels)
    out = [_compare("cross-entropy", [(g, numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits))])]

    mu = rng.dirichlet(np.ones(4))
    out.append(_compare("load-balance", [(load_balance_grad(mu), numeric_grad(lambda: load_balance_loss(mu), mu))]))

    w = rng.uniform(0.1, 1.0, size=(5, 4))
    rm = rng.standard_normal(4)
    g = utilization_backward(w, rm)
    out.append(_compare("utilization", [(g, numeric_grad(lambda: float(utilization(w) @ rm), w))]))
    return out


def _draw_block(rng, cfg, n, size):
    def draw():
        bank = ExpertBank.init(cfg, rng, np.float64)
        x = rng.standard_normal((n, cfg.in_channels, size, size)) + rng.normal(0, 1.0, (n, cfg.in_channels, 1, 1))
        return x, bank

    return _with_gaps(rng, draw, lambda s: gate_logits(s[0], s[1], cfg))


def _check_block(rng, cfg, size, name="es-moe block") -> GradCheckResult:
    x, bank = _draw_block(rng, cfg, 3, size)
    r = rng.standard_normal((3, cfg.out_channels, size, size))
    f = lambda: float((esmoe_forward(x, bank, cfg)[0] * r).sum())
    gx, gbank = esmoe_backward(x, bank, cfg, r)
    analytic = gbank.named_parameters()
    pairs = [(gx, numeric_grad(f, x))]
    pairs += [(analytic[key], numeric_grad(f, arr)) for key, arr in bank.named_parameters().items()]
    return _compare(name, pairs)


def _check_model(rng, cfg, size, lb_weight) -> GradCheckResult:
    x, bank = _draw_block(rng, cfg, 4, size)
    head = init_head(4, cfg.out_channels, rng, np.float64)
    y = np.arange(4) % 4
    _, grads, _, _ = model_loss_and_grads(x, y, bank, head, cfg, lb_weight)
    f = lambda: model_loss(x, y, bank, head, cfg, lb_weight).total
    params = dict(bank.named_parameters())
    params["head.weight"] = head["weight"]
    params["head.bias"] = head["bias"]
    return _compare(f"full model (lb_weight={lb_weight})", [(grads[k], numeric_grad(f, v)) for k, v in params.items()])


def _check_unselected_zero(rng, cfg, size) -> GradCheckResult:
    """Worst absolute gradient on experts outside a single sample's Top-K set (must be 0)."""
    x, bank = _draw_block(rng, cfg, 1, size)
    _, routing = esmoe_forward(x, bank, cfg)
    _, gbank = esmoe_backward(x, bank, cfg, rng.standard_normal((1, cfg.out_channels, size, size)))
    skipped = [i for i in range(cfg.n_experts) if i not in routing.selected[0]]
    worst = max((float(np.abs(a).max()) for i in skipped for a in gbank.experts[i].arrays().values()), default=0.0)
    return GradCheckResult("unselected experts", worst, len(skipped), tolerance=float(np.nextafter(0.0, 1.0)))


def run_suite(seed: int = 0, in_channels: int = 8, size: int = 16, out_channels: int = 8) -> list[GradCheckResult]:
    """Every finite-difference check. Large cases use ``in_channels`` x ``size`` x ``size`` inputs."""
    rng = np.random.default_rng(seed)
    cfg = EsMoeConfig(in_channels, out_channels, mode=Mode.TRAINING)
    small = 6
    results = [_check_dwconv(rng, 3, 4, k, small) for k in (1, 3, 5)]
    results.append(_check_pointwise(rng, 3, 4, 3))
    results += _check_elementwise(rng)
    results += _check_losses(rng)
    results.append(_check_block(rng, EsMoeConfig(3, 4, kernels=(3, 5, 3, 5)), small))
    results.append(_check_block(rng, EsMoeConfig(3, 4, kernels=(3, 5, 3, 5), rms_norm=True), small, "es-moe block + rms norm"))
    results.append(_check_model(rng, cfg, size, 1.5))
    results.append(_check_model(rng, cfg, size, 0.0))
    results.append(_check_unselected_zero(rng, cfg, size))
    return results
