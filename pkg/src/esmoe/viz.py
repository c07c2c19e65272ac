"""Spatial routing heatmaps.

The gate routes a whole image from its channel means. To see *where* in an
image each expert would be preferred, the same gate is applied to local
channel means over a sliding ``window x window`` neighbourhood, giving one
hard Top-K weight map per expert.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .block import ExpertBank, gate_logits, route
from .config import EsMoeConfig, Mode
from .io import write_pgm

__all__ = ["spatial_routing_maps", "tile_maps", "export_heatmaps"]


def spatial_routing_maps(X: np.ndarray, bank: ExpertBank, cfg: EsMoeConfig, window: int = 8) -> np.ndarray:
    """Inference-mode routing weights per location, shape ``(N, E, H, W)``."""
    n, c, h, w = X.shape
    local = uniform_filter(X.astype(np.float64), size=(1, 1, window, window), mode="nearest")
    flat = local.transpose(0, 2, 3, 1).reshape(-1, c, 1, 1)
    cfg = cfg.with_mode(Mode.INFERENCE)
    weights = route(gate_logits(flat, bank, cfg), cfg).weights
    return weights.reshape(n, h, w, cfg.n_experts).transpose(0, 3, 1, 2)


def tile_maps(maps: np.ndarray, gap: int = 1) -> np.ndarray:
    """Lay out ``(N, H, W)`` maps side by side with ``gap`` blank columns."""
    n, h, w = maps.shape
    out = np.zeros((h, n * w + (n - 1) * gap))
    for i in range(n):
        out[:, i * (w + gap) : i * (w + gap) + w] = maps[i]
    return out


def export_heatmaps(out_dir, X: np.ndarray, bank: ExpertBank, cfg: EsMoeConfig, window: int = 8) -> list[Path]:
    """One PGM per expert (``expert_<i>.pgm``); weight 0..1 maps to grey 0..255."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = spatial_routing_maps(X, bank, cfg, window)
    return [write_pgm(out_dir / f"expert_{i}.pgm", tile_maps(maps[:, i])) for i in range(cfg.n_experts)]
