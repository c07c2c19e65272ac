from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, column_or_1d

from .tensor import NonFiniteError, ShapeError


def check_images(X, n_channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """Validate an ``(N, C, H, W)`` image batch and return a contiguous float array."""
    try:
        X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    except ValueError as exc:
        if "NaN" in str(exc) or "infinity" in str(exc):
            raise NonFiniteError(str(exc)) from exc
        raise
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError(f"X has {X.shape[1]} channels, estimator was fitted with {n_channels}")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if y.shape[0] != n_samples:
        raise ShapeError(f"X has {n_samples} samples but y has {y.shape[0]}")
    return y
