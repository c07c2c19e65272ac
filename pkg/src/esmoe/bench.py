"""Analytic cost model and wall-clock comparison of sparse vs dense expert execution."""

from __future__ import annotations

import csv
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .block import EvalCounter, ExpertBank, esmoe_forward, gate_logits, top_k_indices
from .config import EsMoeConfig, Mode
from .tensor import ConvParams, dwconv_forward, softmax

__all__ = [
    "TimerResolutionError",
    "CostModel",
    "BenchResult",
    "count_costs",
    "instrumented_dwconv",
    "enumerate_params",
    "balanced_workload",
    "dense_forward",
    "run_latency",
    "compare_modes",
    "append_csv",
    "format_table",
]

MIN_MEDIAN_US = 20.0
CSV_COLUMNS = ["config_id", "mode", "K", "E", "median_us", "p10", "p90", "counter"]


class TimerResolutionError(RuntimeError):
    """The measured work is too short for the timer to resolve reliably."""


@dataclass
class CostModel:
    expert_macs: list[int]
    expert_params: list[int]
    gate_dense_macs: int
    gap_adds: int
    gate_params: int

    @property
    def expert_flops(self) -> list[int]:
        return [2 * m for m in self.expert_macs]

    @property
    def gate_flops(self) -> int:
        return 2 * self.gate_dense_macs + self.gap_adds

    @property
    def total_params(self) -> int:
        return sum(self.expert_params) + self.gate_params


def count_costs(cfg: EsMoeConfig, height: int, width: int) -> CostModel:
    """Closed-form multiply-accumulate and parameter counts (biases excluded from MACs)."""
    hw = height * width
    c_in, c_out, c_red, e = cfg.in_channels, cfg.out_channels, cfg.reduced_channels, cfg.n_experts
    return CostModel(
        expert_macs=[hw * c_in * k * k + hw * c_in * c_out for k in cfg.kernels],
        expert_params=[ConvParams.param_count(c_in, c_out, k) for k in cfg.kernels],
        gate_dense_macs=c_in * c_red + c_red * e,
        gap_adds=hw * c_in,
        gate_params=c_in * c_red + c_red + c_red * e + e,
    )


def instrumented_dwconv(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, int]:
    """Scalar-loop depthwise-separable convolution that counts every multiply-accumulate.

    Padding taps are counted (they multiply by an implicit zero), matching the
    dense closed form.
    """
    n, c, h, w = x.shape
    k = p.kernel_size
    pad = k // 2
    dw = p.dw_weight.astype(np.float64)
    pw = p.pw_weight.astype(np.float64)
    macs = 0
    mid = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = float(p.dw_bias[ch])
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - pad, j + dj - pad
                            v = float(x[b, ch, ii, jj]) if 0 <= ii < h and 0 <= jj < w else 0.0
                            acc += dw[ch, di, dj] * v
                            macs += 1
                    mid[b, ch, i, j] = acc
    out = np.zeros((n, p.out_channels, h, w))
    for b in range(n):
        for o in range(p.out_channels):
            for i in range(h):
                for j in range(w):
                    acc = float(p.pw_bias[o])
                    for ch in range(c):
                        acc += pw[o, ch] * mid[b, ch, i, j]
                        macs += 1
                    out[b, o, i, j] = acc
    return out, macs // n


def enumerate_params(bank: ExpertBank) -> dict[str, int]:
    """Parameter counts by walking the stored arrays."""
    counts = {f"expert.{i}": sum(a.size for a in e.arrays().values()) for i, e in enumerate(bank.experts)}
    counts["gate"] = bank.gate_param_count
    return counts


def balanced_workload(
    bank: ExpertBank,
    cfg: EsMoeConfig,
    samples: int,
    height: int,
    width: int,
    rng: np.random.Generator,
    candidates: int = 4096,
) -> np.ndarray:
    """Pick ``samples`` inputs whose Top-K selections cover the experts evenly.

    Candidates are unit noise with random per-channel means at several
    scales; since the gate only sees channel means their routing is computed
    from the means alone.
    A depth-first search over the distinct selection sets seen among the
    candidates looks for a multiset in which no expert is used more than
    ``ceil(samples * K / E)`` times; if none exists the first ``samples``
    candidates are used.
    """
    c = cfg.in_channels
    means = rng.normal(0.0, 1.0, size=(candidates, c)) * rng.choice([0.5, 2.0, 8.0], size=(candidates, 1))
    selected = top_k_indices(gate_logits(means[:, :, None, None], bank, cfg), cfg.top_k)
    first: dict[tuple, int] = {}
    for i, sel in enumerate(map(tuple, selected)):
        first.setdefault(sel, i)
    options = sorted(first)
    cap = math.ceil(samples * cfg.top_k / cfg.n_experts)

    def search(start, counts, picked):
        if len(picked) == samples:
            return picked
        for j in range(start, len(options)):
            sel = list(options[j])
            if np.all(counts[sel] < cap):
                counts[sel] += 1
                found = search(j, counts, picked + [first[options[j]]])
                if found:
                    return found
                counts[sel] -= 1
        return None

    chosen = search(0, np.zeros(cfg.n_experts, dtype=int), []) or list(range(samples))
    noise = rng.standard_normal((samples, c, height, width))
    noise -= noise.mean(axis=(2, 3), keepdims=True)
    x = noise + means[chosen][:, :, None, None]
    return x.astype(np.float32)


def dense_forward(x: np.ndarray, bank: ExpertBank, cfg: EsMoeConfig, counter: EvalCounter | None = None):
    """All-expert execution weighted by the full softmax (no sparsity)."""
    logits = gate_logits(x, bank, cfg)
    weights = softmax(logits, axis=1)
    y = np.zeros((x.shape[0], cfg.out_channels, *x.shape[2:]))
    for i, expert in enumerate(bank.experts):
        y += weights[:, i, None, None, None] * dwconv_forward(x, expert)
        if counter is not None:
            counter.add(i, x.shape[0])
    return y.astype(x.dtype)


@dataclass
class BenchResult:
    config_id: str
    mode: str
    n_experts: int
    top_k: int
    samples: int
    median_us: float
    p10_us: float
    p90_us: float
    counter: int
    per_expert: list[int] = field(default_factory=list)

    def csv_row(self) -> list:
        return [self.config_id, self.mode, self.top_k, self.n_experts, f"{self.median_us:.1f}", f"{self.p10_us:.1f}", f"{self.p90_us:.1f}", self.counter]


def _config_id(cfg: EsMoeConfig, h: int, w: int) -> str:
    return f"E{cfg.n_experts}-K{cfg.top_k}-C{cfg.in_channels}x{cfg.out_channels}-{h}x{w}"


def run_latency(
    cfg: EsMoeConfig,
    mode: str = "sparse",
    height: int = 64,
    width: int = 64,
    samples: int | None = None,
    repetitions: int = 50,
    warmup: int = 5,
    seed: int = 0,
    threads: int | None = 1,
) -> BenchResult:
    """Time the expert stage (gating, experts, aggregation).

    ``mode`` is ``"sparse"`` (hard Top-K) or ``"dense"`` (every expert).
    ``samples`` defaults to ``E`` so a balanced workload is exact. ``threads=None``
    leaves the BLAS thread pool alone.
    """
    if mode not in ("sparse", "dense"):
        raise ValueError(f"mode must be 'sparse' or 'dense', got {mode!r}")
    if repetitions < 30:
        raise ValueError(f"need at least 30 repetitions, got {repetitions}")
    if warmup < 5:
        raise ValueError(f"need at least 5 warmup iterations, got {warmup}")
    samples = samples or cfg.n_experts
    cfg = cfg.with_mode(Mode.INFERENCE)
    rng = np.random.default_rng(seed)
    bank = ExpertBank.init(cfg, rng)
    x = balanced_workload(bank, cfg, samples, height, width, rng)

    def call(counter=None):
        if mode == "sparse":
            return esmoe_forward(x, bank, cfg, counter)
        return dense_forward(x, bank, cfg, counter)

    limiter = threadpool_limits(limits=threads) if threads else nullcontext()
    with limiter:
        counter = EvalCounter(cfg.n_experts)
        call(counter)
        for _ in range(warmup - 1):
            call()
        times = np.empty(repetitions)
        for r in range(repetitions):
            t0 = time.perf_counter_ns()
            call()
            times[r] = (time.perf_counter_ns() - t0) / 1e3
    median = float(np.median(times))
    if median < MIN_MEDIAN_US:
        raise TimerResolutionError(
            f"median expert-stage time {median:.2f}us is below {MIN_MEDIAN_US}us; "
            f"use a larger spatial size than {height}x{width}"
        )
    return BenchResult(
        config_id=_config_id(cfg, height, width),
        mode=mode,
        n_experts=cfg.n_experts,
        top_k=cfg.top_k,
        samples=samples,
        median_us=median,
        p10_us=float(np.percentile(times, 10)),
        p90_us=float(np.percentile(times, 90)),
        counter=counter.total,
        per_expert=counter.per_expert.tolist(),
    )


def compare_modes(cfg: EsMoeConfig, **kwargs) -> tuple[BenchResult, BenchResult, float]:
    """Sparse and dense results plus the median latency ratio sparse / dense."""
    sparse = run_latency(cfg, "sparse", **kwargs)
    dense = run_latency(cfg, "dense", **kwargs)
    return sparse, dense, sparse.median_us / dense.median_us


def append_csv(path, results) -> Path:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow(r.csv_row())
    return path


def format_table(results) -> str:
    lines = [f"{'config':<26} {'mode':<7} {'K':>2} {'E':>2} {'median_us':>11} {'p10':>11} {'p90':>11} {'evals':>6}"]
    for r in results:
        lines.append(
            f"{r.config_id:<26} {r.mode:<7} {r.top_k:>2} {r.n_experts:>2} {r.median_us:>11.1f} "
            f"{r.p10_us:>11.1f} {r.p90_us:>11.1f} {r.counter:>6}"
        )
    return "\n".join(lines)
