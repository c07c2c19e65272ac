"""Synthetic multi-scale blob images: one class per characteristic blob radius."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError

__all__ = ["SynthSpec", "SynthSample", "generate", "make_dataset", "sharpness"]


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    Each image holds ``n_blobs`` isotropic Gaussian blobs of the class radius
    at uniform random positions, the same pattern in every channel scaled by a
    per-sample random channel gain drawn from ``gain_range``, plus i.i.d. Gaussian noise of std ``noise``. Pixel values
    are clipped to [-1, 1].
    """

    radii: tuple[float, ...] = (1.0, 2.0, 3.0, 5.0)
    image_size: int = 32
    channels: int = 3
    noise: float = 0.05
    n_blobs: int = 3
    amplitude: float = 0.6
    gain_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.radii) < 2:
            raise ConfigError("need at least two classes")
        if len(set(self.radii)) != len(self.radii) or min(self.radii) <= 0:
            raise ConfigError(f"radii must be distinct and positive, got {self.radii}")
        if self.image_size < 4 or self.channels < 1 or self.n_blobs < 1:
            raise ConfigError("image_size >= 4, channels >= 1 and n_blobs >= 1 required")
        if 2 * max(self.radii) >= self.image_size:
            raise ConfigError(f"largest radius {max(self.radii)} does not fit a {self.image_size}px image")
        if self.noise < 0 or self.amplitude <= 0:
            raise ConfigError("noise must be >= 0 and amplitude > 0")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ConfigError(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}")

    @property
    def num_classes(self) -> int:
        return len(self.radii)


@dataclass
class SynthSample:
    image: np.ndarray  # (1, C, H, W) float32
    label: int
    scale_tag: float


def _label(seed: int, index: int, num_classes: int) -> int:
    return (index + seed) % num_classes


def _render(seed: int, index: int, spec: SynthSpec) -> SynthSample:
    label = _label(seed, index, spec.num_classes)
    r = spec.radii[label]
    rng = np.random.default_rng([seed, index])
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    canvas = np.zeros((s, s))
    for cy, cx in rng.uniform(r, s - 1 - r, size=(spec.n_blobs, 2)):
        canvas += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    gains = rng.uniform(*spec.gain_range, size=spec.channels)
    img = spec.amplitude * gains[:, None, None] * canvas[None]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return SynthSample(image=img[None], label=label, scale_tag=r)


def generate(seed: int, n: int, spec: SynthSpec | None = None, start: int = 0) -> list[SynthSample]:
    """Samples ``start .. start+n-1``; each one depends only on ``(seed, index)``."""
    spec = spec or SynthSpec()
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    return [_render(seed, i, spec) for i in range(start, start + n)]


def make_dataset(seed: int, n: int, spec: SynthSpec | None = None, start: int = 0):
    """``(X, y)`` arrays of shape ``(n, C, H, W)`` and ``(n,)``."""
    samples = generate(seed, n, spec, start)
    X = np.concatenate([s.image for s in samples], axis=0)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def sharpness(image: np.ndarray) -> float:
    """Mean absolute forward-difference gradient divided by mean absolute intensity."""
    img = np.asarray(image, dtype=np.float64)
    gy = np.abs(np.diff(img, axis=-2)).mean()
    gx = np.abs(np.diff(img, axis=-1)).mean()
    return float((gx + gy) / np.abs(img).mean())
