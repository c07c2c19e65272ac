"""Training harness: synthetic data in, metrics CSV, checkpoint and heatmaps out."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .block import EvalCounter
from .config import ConfigError, EsMoeConfig, Mode
from .data import SynthSpec, make_dataset
from .estimator import EpochRecord, ESMoEClassifier
from .io import Checkpoint, load_checkpoint, save_checkpoint
from .losses import UtilizationStats, utilization_stats
from .tensor import ConvParams
from .viz import export_heatmaps

__all__ = [
    "CounterMismatchError",
    "TrainConfig",
    "TrainReport",
    "EvalResult",
    "train",
    "evaluate",
    "split_data",
    "save_model",
    "model_from_checkpoint",
    "activated_params",
    "matched_baseline",
    "report_columns",
]


class CounterMismatchError(AssertionError):
    """Inference evaluated a different number of experts than K per sample."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    lb_weight: float = 1.5
    seed: int = 1
    n_train: int = 256
    n_val: int = 128
    n_experts: int = 4
    top_k: int = 2
    kernels: tuple[int, ...] | None = None
    out_channels: int = 8
    reduction: int = 8
    eps: float = 1e-9
    rms_norm: bool = False
    standardize: bool = True
    spread: float = 2.0
    data: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        if self.kernels is not None:
            object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.base_lr >= 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.lb_weight < 0:
            raise ConfigError(f"lb_weight must be >= 0, got {self.lb_weight}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        self.model_config()  # validates E, K, kernels

    def model_config(self) -> EsMoeConfig:
        return EsMoeConfig(
            in_channels=self.data.channels,
            out_channels=self.out_channels,
            n_experts=self.n_experts,
            top_k=self.top_k,
            kernels=self.kernels,
            reduction=self.reduction,
            eps=self.eps,
            rms_norm=self.rms_norm,
        )

    def estimator(self) -> ESMoEClassifier:
        return ESMoEClassifier(
            n_experts=self.n_experts,
            top_k=self.top_k,
            kernels=self.kernels,
            out_channels=self.out_channels,
            reduction=self.reduction,
            eps=self.eps,
            rms_norm=self.rms_norm,
            standardize=self.standardize,
            spread=self.spread,
            lb_weight=self.lb_weight,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.base_lr,
            momentum=self.momentum,
            random_state=self.seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernels"] = list(self.model_config().kernels)
        d["data"]["radii"] = list(self.data.radii)
        d["data"]["gain_range"] = list(self.data.gain_range)
        return d


def report_columns(n_experts: int) -> list[str]:
    base = ["epoch", "lr", "task_loss", "lb_loss", "total_loss", "train_acc", "val_acc", "entropy_train_bits", "entropy_infer_bits"]
    return base + [f"mu_{i}" for i in range(n_experts)]


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list[EpochRecord]
    checkpoint_path: Path | None = None
    csv_path: Path | None = None
    seconds: float = 0.0
    model: ESMoEClassifier | None = field(default=None, repr=False)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def rows(self) -> list[list]:
        return [
            [r.epoch, r.lr, r.task_loss, r.lb_loss, r.total_loss, r.train_acc, r.val_acc, r.entropy_train_bits, r.entropy_infer_bits, *r.mu]
            for r in self.epochs
        ]

    def write_csv(self, path) -> Path:
        """Floats are written with ``repr`` so equal runs give equal bytes."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(report_columns(self.config.n_experts))
            for row in self.rows():
                writer.writerow([v if isinstance(v, int) else repr(float(v)) for v in row])
        self.csv_path = path
        return path


def split_data(cfg: TrainConfig):
    """Train and validation sets drawn from disjoint index ranges of one seed."""
    X, y = make_dataset(cfg.seed, cfg.n_train, cfg.data)
    Xv, yv = make_dataset(cfg.seed, cfg.n_val, cfg.data, start=cfg.n_train)
    return X, y, Xv, yv


def train(cfg: TrainConfig, out_dir=None, heatmaps: int = 8) -> TrainReport:
    """Fit one model. With ``out_dir`` also writes ``report.csv``, ``model.esmo``
    and ``heatmaps/expert_<i>.pgm`` for the first ``heatmaps`` validation images."""
    X, y, Xv, yv = split_data(cfg)
    t0 = time.perf_counter()
    model = cfg.estimator().fit(X, y, Xv, yv)
    report = TrainReport(cfg, list(model.history_), seconds=time.perf_counter() - t0, model=model)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        report.checkpoint_path = save_model(out_dir / "model.esmo", model)
        if heatmaps:
            export_heatmaps(out_dir / "heatmaps", model.preprocess(Xv[:heatmaps]), model.bank_, model.config_)
    return report


def save_model(path, model: ESMoEClassifier) -> Path:
    extras = {"mean": model.input_mean_, "scale": model.input_scale_}
    return save_checkpoint(path, model.config_, model.bank_, model.head_, extras)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> ESMoEClassifier:
    """Rebuild a fitted classifier (classes ``0..n-1``) from a checkpoint."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.head is None:
        raise ConfigError("checkpoint has no classifier head")
    cfg = ckpt.cfg
    model = ESMoEClassifier(
        n_experts=cfg.n_experts,
        top_k=cfg.top_k,
        kernels=cfg.kernels,
        out_channels=cfg.out_channels,
        reduction=cfg.reduction,
        eps=cfg.eps,
        rms_norm=cfg.rms_norm,
    )
    model.config_ = cfg.with_mode(Mode.TRAINING)
    model.bank_ = ckpt.bank
    model.head_ = ckpt.head
    model.classes_ = np.arange(ckpt.head["weight"].shape[0])
    model.n_features_in_ = cfg.in_channels
    model.input_mean_ = ckpt.extras.get("mean", np.zeros(cfg.in_channels, np.float32))
    model.input_scale_ = ckpt.extras.get("scale", np.ones(cfg.in_channels, np.float32))
    model.expert_counter_ = EvalCounter(cfg.n_experts)
    model.history_ = []
    return model


@dataclass
class EvalResult:
    accuracy: float
    stats: UtilizationStats
    expert_evaluations: int
    n_samples: int


def evaluate(model: ESMoEClassifier, X, y) -> EvalResult:
    """Inference-mode accuracy and routing statistics.

    Raises :class:`CounterMismatchError` unless exactly ``K * len(X)`` expert
    evaluations were performed.
    """
    model.expert_counter_.reset()
    pred = model.predict(X)
    evals = model.expert_counter_.total
    expected = model.config_.top_k * len(X)
    if evals != expected:
        raise CounterMismatchError(f"{evals} expert evaluations for {len(X)} samples, expected {expected}")
    stats = utilization_stats(model.routing(X, Mode.INFERENCE))
    return EvalResult(float(np.mean(pred == np.asarray(y))), stats, evals, len(X))


def activated_params(cfg: EsMoeConfig, n_classes: int) -> float:
    """Parameters touched per sample at inference: gate, K average experts, head."""
    c_red = cfg.reduced_channels
    gate = cfg.in_channels * c_red + c_red + c_red * cfg.n_experts + cfg.n_experts
    experts = [ConvParams.param_count(cfg.in_channels, cfg.out_channels, k) for k in cfg.kernels]
    head = n_classes * cfg.out_channels + n_classes
    return gate + cfg.top_k * float(np.mean(experts)) + head


def matched_baseline(cfg: TrainConfig, kernel: int = 5) -> TrainConfig:
    """Single-expert (E=K=1) config whose activated parameter count is closest to ``cfg``'s."""
    target = activated_params(cfg.model_config(), cfg.data.num_classes)
    best = min(
        range(1, 8 * cfg.out_channels + 1),
        key=lambda c: abs(
            activated_params(
                dataclasses.replace(cfg, n_experts=1, top_k=1, kernels=(kernel,), out_channels=c).model_config(),
                cfg.data.num_classes,
            )
            - target
        ),
    )
    return dataclasses.replace(cfg, n_experts=1, top_k=1, kernels=(kernel,), out_channels=best)
