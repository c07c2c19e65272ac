"""Rank-4 NCHW numeric kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape ``(N, C, H, W)``.
Parameters are stored as float32 by default; every reduction is carried out
in float64 and the result is cast back to the common input dtype, so the same
kernels serve float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "ConvParams",
    "check_tensor",
    "uniform_init",
    "dwconv_forward",
    "dwconv_backward",
    "gap",
    "gap_backward",
    "pointwise_forward",
    "pointwise_backward",
    "silu",
    "silu_backward",
    "softmax",
    "softmax_backward",
    "softmax_over_channels",
]


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes are inconsistent."""


class NonFiniteError(ValueError):
    """Raised when an operation would consume or produce NaN/Inf."""


def check_tensor(x, name: str = "x") -> np.ndarray:
    """Validate a rank-4 NCHW floating tensor and return it as an ndarray."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    if x.size == 0 or min(x.shape) < 1:
        raise ShapeError(f"{name} must have positive dims, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


def _out_dtype(*arrays) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


def uniform_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConvParams:
    """Parameters of one depthwise-separable convolution.

    ``dw_weight`` is ``(C_in, k, k)``, ``dw_bias`` is ``(C_in,)``,
    ``pw_weight`` is ``(C_out, C_in)`` and ``pw_bias`` is ``(C_out,)``.
    """

    dw_weight: np.ndarray
    dw_bias: np.ndarray
    pw_weight: np.ndarray
    pw_bias: np.ndarray

    def __post_init__(self):
        dw = self.dw_weight
        if dw.ndim != 3 or dw.shape[1] != dw.shape[2]:
            raise ShapeError(f"depthwise kernel must be (C_in, k, k), got {dw.shape}")
        if dw.shape[1] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {dw.shape[1]}")
        c_in = dw.shape[0]
        if self.dw_bias.shape != (c_in,):
            raise ShapeError(f"depthwise bias must be ({c_in},), got {self.dw_bias.shape}")
        if self.pw_weight.ndim != 2 or self.pw_weight.shape[1] != c_in:
            raise ShapeError(f"pointwise kernel must be (C_out, {c_in}), got {self.pw_weight.shape}")
        if self.pw_bias.shape != (self.pw_weight.shape[0],):
            raise ShapeError(f"pointwise bias must be ({self.pw_weight.shape[0]},), got {self.pw_bias.shape}")

    @property
    def in_channels(self) -> int:
        return self.dw_weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pw_weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.dw_weight.shape[1]

    @staticmethod
    def param_count(c_in: int, c_out: int, k: int) -> int:
        return c_in * k * k + c_in + c_in * c_out + c_out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float32) -> "ConvParams":
        """Uniform(+-sqrt(1/fan_in)) initialisation for both stages."""
        if k < 1 or k % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {k}")
        return cls(
            dw_weight=uniform_init((c_in, k, k), k * k, rng, dtype),
            dw_bias=uniform_init((c_in,), k * k, rng, dtype),
            pw_weight=uniform_init((c_out, c_in), c_in, rng, dtype),
            pw_bias=uniform_init((c_out,), c_in, rng, dtype),
        )

    @classmethod
    def zeros_like(cls, other: "ConvParams") -> "ConvParams":
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})


def _depthwise64(x64: np.ndarray, w64: np.ndarray, b64: np.ndarray) -> np.ndarray:
    n, c, h, wd = x64.shape
    k = w64.shape[-1]
    pad = k // 2
    xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x64)
    out[...] = b64[None, :, None, None]
    tmp = np.empty_like(x64)
    for i in range(k):
        for j in range(k):
            np.multiply(w64[None, :, i, j, None, None], xp[:, :, i : i + h, j : j + wd], out=tmp)
            out += tmp
    return out


def _pointwise64(x64: np.ndarray, w64: np.ndarray, b64: np.ndarray) -> np.ndarray:
    n, c, h, w = x64.shape
    y = np.matmul(w64, x64.reshape(n, c, h * w)).reshape(n, w64.shape[0], h, w)
    y += b64[None, :, None, None]
    return y


def dwconv_forward(x, p: ConvParams, return_mid: bool = False):
    """Depthwise kxk convolution (stride 1, same zero padding) then a 1x1 mix.

    With ``return_mid=True`` the float64 depthwise activation is also returned
    so the caller can reuse it in :func:`dwconv_backward`.
    """
    x = check_tensor(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, expert expects {p.in_channels}")
    dt = _out_dtype(x, p.dw_weight, p.pw_weight)
    x64 = x.astype(np.float64, copy=False)
    mid = _depthwise64(x64, p.dw_weight.astype(np.float64), p.dw_bias.astype(np.float64))
    y = _pointwise64(mid, p.pw_weight.astype(np.float64), p.pw_bias.astype(np.float64)).astype(dt)
    if return_mid:
        return y, mid
    return y


def dwconv_backward(x, p: ConvParams, grad_out, mid: np.ndarray | None = None):
    """Gradients of :func:`dwconv_forward` w.r.t. the input and every parameter.

    Returns ``(grad_x, grad_p)`` where ``grad_p`` is a :class:`ConvParams`
    holding gradients with the same shapes as ``p``.
    """
    x = check_tensor(x)
    grad_out = np.asarray(grad_out)
    n, c, h, wd = x.shape
    if c != p.in_channels or grad_out.shape != (n, p.out_channels, h, wd):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} and "
            f"expert ({p.in_channels}->{p.out_channels})"
        )
    dt = _out_dtype(x, p.dw_weight, p.pw_weight)
    k = p.kernel_size
    pad = k // 2
    x64 = x.astype(np.float64, copy=False)
    w64 = p.dw_weight.astype(np.float64)
    g64 = grad_out.astype(np.float64, copy=False)
    if mid is None:
        mid = _depthwise64(x64, w64, p.dw_bias.astype(np.float64))

    g_pw_w = np.einsum("nohw,nchw->oc", g64, mid, optimize=True)
    g_pw_b = g64.sum(axis=(0, 2, 3))
    g_mid = np.einsum("oc,nohw->nchw", p.pw_weight.astype(np.float64), g64, optimize=True)
    g_dw_b = g_mid.sum(axis=(0, 2, 3))

    xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    g_xp = np.zeros_like(xp)
    g_dw_w = np.empty((c, k, k))
    for i in range(k):
        for j in range(k):
            g_dw_w[:, i, j] = np.einsum("nchw,nchw->c", g_mid, xp[:, :, i : i + h, j : j + wd])
            g_xp[:, :, i : i + h, j : j + wd] += w64[None, :, i, j, None, None] * g_mid
    g_x = g_xp[:, :, pad : pad + h, pad : pad + wd]

    grad_p = ConvParams(
        dw_weight=g_dw_w.astype(dt),
        dw_bias=g_dw_b.astype(dt),
        pw_weight=g_pw_w.astype(dt),
        pw_bias=g_pw_b.astype(dt),
    )
    return g_x.astype(dt), grad_p


def gap(x) -> np.ndarray:
    """Global average pooling, ``(N, C, H, W) -> (N, C, 1, 1)``."""
    x = check_tensor(x)
    return x.astype(np.float64, copy=False).mean(axis=(2, 3), keepdims=True).astype(x.dtype)


def gap_backward(grad_out, shape) -> np.ndarray:
    n, c, h, w = shape
    grad_out = np.asarray(grad_out).reshape(n, c, 1, 1)
    return np.broadcast_to(grad_out / (h * w), shape).astype(grad_out.dtype)


def pointwise_forward(x, w, b) -> np.ndarray:
    """1x1 convolution; on ``(N, C, 1, 1)`` inputs this is a dense layer."""
    x = check_tensor(x)
    w, b = np.asarray(w), np.asarray(b)
    if w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"weight {w.shape} / bias {b.shape} incompatible with {x.shape[1]} input channels")
    dt = _out_dtype(x, w, b)
    y = _pointwise64(x.astype(np.float64, copy=False), w.astype(np.float64), b.astype(np.float64))
    return y.astype(dt)


def pointwise_backward(x, w, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)`` for :func:`pointwise_forward`."""
    x = check_tensor(x)
    w = np.asarray(w)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (x.shape[0], w.shape[0], *x.shape[2:]):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape}")
    dt = _out_dtype(x, w)
    g64 = grad_out.astype(np.float64, copy=False)
    x64 = x.astype(np.float64, copy=False)
    gx = np.einsum("oc,nohw->nchw", w.astype(np.float64), g64, optimize=True)
    gw = np.einsum("nohw,nchw->oc", g64, x64, optimize=True)
    gb = g64.sum(axis=(0, 2, 3))
    return gx.astype(dt), gw.astype(dt), gb.astype(dt)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("silu input contains non-finite values")
    x64 = x.astype(np.float64, copy=False)
    return (x64 * _sigmoid(x64)).astype(x.dtype)


def silu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    x64 = x.astype(np.float64, copy=False)
    s = _sigmoid(x64)
    return (np.asarray(grad_out, dtype=np.float64) * s * (1.0 + x64 * (1.0 - s))).astype(x.dtype)


def softmax(z, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax, computed in float64."""
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax input contains non-finite values")
    z64 = z.astype(np.float64, copy=False)
    e = np.exp(z64 - z64.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, grad_out, axis: int = -1) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    return probs * (g - (g * probs).sum(axis=axis, keepdims=True))


def softmax_over_channels(x) -> np.ndarray:
    """Softmax across the channel axis of an ``(N, E, 1, 1)`` tensor."""
    x = check_tensor(x)
    return softmax(x, axis=1).astype(x.dtype)
