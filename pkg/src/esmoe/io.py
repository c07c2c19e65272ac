"""Binary checkpoint and dataset files, plus PGM heatmaps.

Checkpoint layout (all integers little-endian):

    b"ESMO"                      magic
    u32   version                (currently 1)
    u32   in_channels, out_channels, n_experts, top_k, reduction
    f64   eps
    u8    rms_norm flag
    u32   n_classes              (0 when no classifier head is stored)
    u32 x n_experts              kernel sizes
    u32   n_arrays
    per array:
        u32 name length, name (utf-8), u32 rank, u32 x rank dims,
        float32 payload in C order

Dataset files use the same style with magic ``b"ESMD"``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .block import ExpertBank
from .config import EsMoeConfig

CHECKPOINT_MAGIC = b"ESMO"
DATASET_MAGIC = b"ESMD"
FORMAT_VERSION = 1

__all__ = [
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "ConfigMismatchError",
    "CorruptFileError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "save_dataset",
    "load_dataset",
    "write_pgm",
    "read_pgm",
]


class CheckpointError(Exception):
    """Base class for unreadable or incompatible binary files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def done(self):
        if self.pos != len(self.data):
            raise CorruptFileError(f"{len(self.data) - self.pos} trailing bytes after payload")


def _check_header(r: _Reader, magic: bytes):
    head = r.data[:4]
    if head != magic[: len(head)]:
        raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")


@dataclass
class Checkpoint:
    cfg: EsMoeConfig
    bank: ExpertBank
    head: dict[str, np.ndarray] | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)


def _same_architecture(a: EsMoeConfig, b: EsMoeConfig) -> bool:
    keys = ("in_channels", "out_channels", "n_experts", "top_k", "kernels", "reduction", "rms_norm")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def save_checkpoint(
    path,
    cfg: EsMoeConfig,
    bank: ExpertBank,
    head: dict[str, np.ndarray] | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> Path:
    """``extras`` are stored under ``input.<name>`` (e.g. input standardization)."""
    bank.check(cfg)
    arrays = dict(bank.named_parameters())
    for name, arr in (extras or {}).items():
        arrays[f"input.{name}"] = arr
    n_classes = 0
    if head is not None:
        n_classes = head["weight"].shape[0]
        arrays["head.weight"] = head["weight"]
        arrays["head.bias"] = head["bias"]
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<5I", cfg.in_channels, cfg.out_channels, cfg.n_experts, cfg.top_k, cfg.reduction),
        struct.pack("<dB", cfg.eps, int(cfg.rms_norm)),
        struct.pack("<I", n_classes),
        struct.pack(f"<{cfg.n_experts}I", *cfg.kernels),
        struct.pack("<I", len(arrays)),
    ]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path, expected: EsMoeConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` guards against loading the wrong architecture."""
    r = _Reader(Path(path).read_bytes())
    _check_header(r, CHECKPOINT_MAGIC)
    c_in, c_out, e, k, red = r.unpack("5I")
    eps, rms = r.unpack("dB")
    n_classes = r.u32()
    if e == 0 or e > 4096:
        raise CorruptFileError(f"implausible expert count {e}")
    kernels = r.unpack(f"{e}I")
    try:
        cfg = EsMoeConfig(c_in, c_out, e, k, kernels, red, eps, rms_norm=bool(rms))
    except ValueError as exc:
        raise CorruptFileError(f"stored config is invalid: {exc}") from exc
    if expected is not None and not _same_architecture(cfg, expected):
        raise ConfigMismatchError(
            f"checkpoint holds E={cfg.n_experts}, K={cfg.top_k}, kernels={list(cfg.kernels)}, "
            f"{cfg.in_channels}->{cfg.out_channels}; expected E={expected.n_experts}, K={expected.top_k}, "
            f"kernels={list(expected.kernels)}, {expected.in_channels}->{expected.out_channels}"
        )
    if expected is not None:
        cfg = cfg.with_mode(expected.mode)

    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        if rank > 8:
            raise CorruptFileError(f"array {name!r} has implausible rank {rank}")
        dims = r.unpack(f"{rank}I") if rank else ()
        count = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    r.done()

    extras = {k[len("input.") :]: arrays.pop(k) for k in list(arrays) if k.startswith("input.")}
    head = None
    if n_classes:
        try:
            head = {"weight": arrays.pop("head.weight"), "bias": arrays.pop("head.bias")}
        except KeyError as exc:
            raise CorruptFileError(f"missing head array {exc}") from exc
    try:
        bank = ExpertBank.from_named(arrays, e)
        bank.check(cfg)
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"parameter arrays inconsistent with config: {exc}") from exc
    return Checkpoint(cfg, bank, head, extras)


def save_dataset(path, X: np.ndarray, y: np.ndarray, radii=()) -> Path:
    X = np.asarray(X)
    n, c, h, w = X.shape
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<5I", n, c, h, w, len(radii)),
        struct.pack(f"<{len(radii)}d", *radii),
        np.asarray(y, dtype="<u4").tobytes(),
        np.ascontiguousarray(X, dtype="<f4").tobytes(),
    ]
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_dataset(path):
    """Returns ``(X, y, radii)``."""
    r = _Reader(Path(path).read_bytes())
    _check_header(r, DATASET_MAGIC)
    n, c, h, w, n_radii = r.unpack("5I")
    radii = r.unpack(f"{n_radii}d")
    y = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    X = np.frombuffer(r.take(4 * n * c * h * w), dtype="<f4").astype(np.float32).reshape(n, c, h, w)
    r.done()
    return X, y, tuple(radii)


def write_pgm(path, values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> Path:
    """Binary (P5) 8-bit greyscale image; ``lo..hi`` maps linearly onto 0..255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {v.shape}")
    scaled = np.clip(np.round((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii") + scaled.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = data.split(b"\n", 3)
    if header[0] != b"P5":
        raise BadMagicError("not a binary PGM")
    w, h = map(int, header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(h, w)
