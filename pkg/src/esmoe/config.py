from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from itertools import cycle, islice

DEFAULT_KERNELS = (3, 5, 7, 9)


class ConfigError(ValueError):
    """Invalid architectural or training configuration."""


class Mode(str, enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


def default_kernels(n_experts: int) -> tuple[int, ...]:
    """The odd progression 3, 5, 7, 9 cycled (or truncated) to ``n_experts`` entries."""
    return tuple(islice(cycle(DEFAULT_KERNELS), n_experts))


@dataclass(frozen=True)
class EsMoeConfig:
    """Architecture of one ES-MoE block.

    ``kernels`` defaults to :func:`default_kernels`. ``reduction`` is the
    gating bottleneck ratio; the hidden width is ``max(in_channels // reduction, 8)``.
    """

    in_channels: int
    out_channels: int
    n_experts: int = 4
    top_k: int = 2
    kernels: tuple[int, ...] = field(default=None)
    reduction: int = 8
    eps: float = 1e-9
    mode: Mode = Mode.TRAINING
    rms_norm: bool = False

    def __post_init__(self):
        if self.kernels is None:
            object.__setattr__(self, "kernels", default_kernels(self.n_experts))
        else:
            object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must satisfy 1 <= K <= E, got K={self.top_k}, E={self.n_experts}")
        if len(self.kernels) != self.n_experts:
            raise ConfigError(f"need exactly {self.n_experts} kernel sizes, got {list(self.kernels)}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd and positive, got {list(self.kernels)}")
        if self.reduction < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {self.reduction}")
        if not self.eps >= 0:
            raise ConfigError(f"eps must be non-negative, got {self.eps}")

    @property
    def reduced_channels(self) -> int:
        return max(self.in_channels // self.reduction, 8)

    @property
    def sparsity(self) -> float:
        """Fraction of experts skipped per sample at inference."""
        return (self.n_experts - self.top_k) / self.n_experts

    def with_mode(self, mode: Mode | str) -> "EsMoeConfig":
        return replace(self, mode=Mode(mode))
