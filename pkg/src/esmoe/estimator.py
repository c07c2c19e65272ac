"""scikit-learn style classifier: ES-MoE block -> global average pool -> linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .block import (
    EvalCounter,
    ExpertBank,
    RoutingOutcome,
    esmoe_backward,
    esmoe_forward,
    esmoe_forward_cached,
    gate_logits,
    route,
)
from .config import EsMoeConfig, Mode
from .losses import (
    LossBreakdown,
    load_balance_grad,
    load_balance_loss,
    routing_entropy,
    softmax_cross_entropy,
    total_loss,
    utilization,
    utilization_backward,
)
from .tensor import NonFiniteError, softmax, uniform_init
from .validation import check_images, check_labels

__all__ = [
    "TrainingDivergedError",
    "EpochRecord",
    "ESMoEClassifier",
    "init_head",
    "model_loss",
    "model_loss_and_grads",
    "cosine_lr",
]


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    lb_loss: float
    total_loss: float
    train_acc: float
    val_acc: float
    entropy_train_bits: float
    entropy_infer_bits: float
    mu: np.ndarray = field(repr=False)


def init_head(n_classes: int, n_features: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    return {
        "weight": uniform_init((n_classes, n_features), n_features, rng, dtype),
        "bias": uniform_init((n_classes,), n_features, rng, dtype),
    }


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def _head_forward(y_block: np.ndarray, head: dict[str, np.ndarray]):
    pooled = y_block.astype(np.float64, copy=False).mean(axis=(2, 3))
    logits = pooled @ head["weight"].astype(np.float64).T + head["bias"].astype(np.float64)
    return pooled, logits


def model_loss(X, y, bank: ExpertBank, head, cfg: EsMoeConfig, lb_weight: float) -> LossBreakdown:
    """Training-mode total loss without gradients."""
    y_block, routing = esmoe_forward(X, bank, cfg.with_mode(Mode.TRAINING))
    _, logits = _head_forward(y_block, head)
    task, _ = softmax_cross_entropy(logits, y)
    return total_loss(task, load_balance_loss(utilization(routing)), lb_weight)


def model_loss_and_grads(X, y, bank: ExpertBank, head, cfg: EsMoeConfig, lb_weight: float, counter=None):
    """Total loss and gradients for every bank and head parameter.

    Returns ``(breakdown, grads, logits, routing)`` where ``grads`` is keyed
    like :meth:`ExpertBank.named_parameters` plus ``head.weight``/``head.bias``.
    """
    cfg = cfg.with_mode(Mode.TRAINING)
    y_block, routing, cache = esmoe_forward_cached(X, bank, cfg, counter)
    pooled, logits = _head_forward(y_block, head)
    task, g_logits = softmax_cross_entropy(logits, y)
    mu = utilization(routing)
    breakdown = total_loss(task, load_balance_loss(mu), lb_weight)

    dt = bank.dtype
    g_head_w = g_logits.T @ pooled
    g_head_b = g_logits.sum(axis=0)
    g_pooled = g_logits @ head["weight"].astype(np.float64)
    n, c, h, w = y_block.shape
    g_block = np.broadcast_to((g_pooled / (h * w))[:, :, None, None], (n, c, h, w))
    g_weights = lb_weight * utilization_backward(routing.weights, load_balance_grad(mu)) if lb_weight else None
    _, g_bank = esmoe_backward(X, bank, cfg, g_block, grad_weights=g_weights, cache=cache)

    grads = dict(g_bank.named_parameters())
    grads["head.weight"] = g_head_w.astype(dt)
    grads["head.bias"] = g_head_b.astype(dt)
    return breakdown, grads, logits, routing


class ESMoEClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier built around one ES-MoE block.

    The block is followed by global average pooling and a linear head.
    Training uses soft Top-K routing, momentum SGD with a cosine schedule
    and the load-balancing penalty weighted by ``lb_weight``. Prediction,
    :meth:`transform` and validation use hard Top-K routing.

    Parameters
    ----------
    n_experts, top_k : int
        Number of experts and how many are active per sample.
    kernels : tuple of int or None
        Odd kernel size per expert; ``None`` cycles 3, 5, 7, 9.
    out_channels : int
        Output channels of every expert.
    reduction : int
        Gating bottleneck ratio.
    standardize : bool
        Centre each input channel and rescale it so that per-image channel
        means have standard deviation ``spread`` over the training set. The
        gate only sees channel means, so this sets how distinct its inputs
        are across samples.
    lb_weight : float
        Weight of the load-balancing loss.
    epochs, batch_size, learning_rate, momentum
        SGD settings; the learning rate follows a per-step cosine decay to 0.
    random_state : int or None
        Seeds initialisation and shuffling.

    Attributes
    ----------
    config_ : EsMoeConfig
    bank_ : ExpertBank
    head_ : dict with ``weight`` ``(n_classes, out_channels)`` and ``bias``
    classes_ : ndarray
    input_mean_, input_scale_ : ndarray of shape (C,)
        Affine input standardization (identity when ``standardize=False``).
    history_ : list of EpochRecord
    expert_counter_ : EvalCounter
        Expert evaluations performed by inference-mode calls.
    """

    def __init__(
        self,
        n_experts=4,
        top_k=2,
        kernels=None,
        out_channels=16,
        reduction=8,
        eps=1e-9,
        rms_norm=False,
        standardize=True,
        spread=2.0,
        lb_weight=1.5,
        epochs=30,
        batch_size=32,
        learning_rate=0.05,
        momentum=0.9,
        random_state=0,
        verbose=False,
    ):
        self.n_experts = n_experts
        self.top_k = top_k
        self.kernels = kernels
        self.out_channels = out_channels
        self.reduction = reduction
        self.eps = eps
        self.rms_norm = rms_norm
        self.standardize = standardize
        self.spread = spread
        self.lb_weight = lb_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state
        self.verbose = verbose

    def _make_config(self, in_channels: int) -> EsMoeConfig:
        return EsMoeConfig(
            in_channels=in_channels,
            out_channels=self.out_channels,
            n_experts=self.n_experts,
            top_k=self.top_k,
            kernels=self.kernels,
            reduction=self.reduction,
            eps=self.eps,
            rms_norm=self.rms_norm,
        )

    def _init_state(self, X, y):
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.config_ = self._make_config(X.shape[1])
        self.n_features_in_ = X.shape[1]
        c = X.shape[1]
        self.input_mean_ = np.zeros(c, dtype=np.float32)
        self.input_scale_ = np.ones(c, dtype=np.float32)
        if self.standardize:
            means = X.astype(np.float64).mean(axis=(2, 3))
            spread = means.std(axis=0)
            spread[spread == 0] = 1.0
            self.input_mean_ = means.mean(axis=0).astype(np.float32)
            self.input_scale_ = (self.spread / spread).astype(np.float32)
        rng = np.random.default_rng(self.random_state)
        self.bank_ = ExpertBank.init(self.config_, rng)
        self.head_ = init_head(len(self.classes_), self.out_channels, rng)
        self.expert_counter_ = EvalCounter(self.n_experts)
        self.history_ = []
        return rng, y_idx

    def initialize(self, X, y):
        """Set up parameters and input standardization from ``(X, y)`` without training."""
        X = check_images(X)
        self._init_state(X, check_labels(y, X.shape[0]))
        return self

    def parameters_(self) -> dict[str, np.ndarray]:
        params = dict(self.bank_.named_parameters())
        params["head.weight"] = self.head_["weight"]
        params["head.bias"] = self.head_["bias"]
        return params

    def fit(self, X, y, X_val=None, y_val=None):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        rng, y_idx = self._init_state(X, y)
        if X_val is None:
            X_val, yv_idx = X, y_idx
        else:
            X_val = check_images(X_val, X.shape[1])
            yv_idx = np.searchsorted(self.classes_, check_labels(y_val, X_val.shape[0]))
        X, X_val = self.preprocess(X), self.preprocess(X_val)

        params = self.parameters_()
        velocity = {k: np.zeros(v.shape) for k, v in params.items()}
        n = X.shape[0]
        steps_per_epoch = math.ceil(n / self.batch_size)
        total_steps = self.epochs * steps_per_epoch
        step = 0
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(n)
            sums = np.zeros(3)
            correct = 0
            lr = self.learning_rate
            for b in range(steps_per_epoch):
                idx = perm[b * self.batch_size : (b + 1) * self.batch_size]
                lr = cosine_lr(self.learning_rate, step, total_steps)
                try:
                    loss, grads, logits, _ = model_loss_and_grads(
                        X[idx], y_idx[idx], self.bank_, self.head_, self.config_, self.lb_weight
                    )
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
                if not math.isfinite(loss.total):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}: {loss}")
                sums += np.array([loss.task_loss, loss.lb_loss, loss.total]) * len(idx)
                correct += int((logits.argmax(axis=1) == y_idx[idx]).sum())
                for k, p in params.items():
                    v = velocity[k]
                    v *= self.momentum
                    v += grads[k]
                    p -= (lr * v).astype(p.dtype)
                step += 1
            record = self._epoch_record(epoch, lr, sums / n, correct / n, X_val, yv_idx)
            self.history_.append(record)
            if self.verbose:
                print(
                    f"epoch {epoch:3d} lr={lr:.4f} task={record.task_loss:.4f} lb={record.lb_loss:.5f} "
                    f"val_acc={record.val_acc:.3f} mu={np.round(record.mu, 3).tolist()}"
                )
        return self

    def preprocess(self, X) -> np.ndarray:
        """Apply the fitted input standardization."""
        shape = (1, -1, 1, 1)
        return ((X - self.input_mean_.reshape(shape)) * self.input_scale_.reshape(shape)).astype(np.float32)

    def _epoch_record(self, epoch, lr, means, train_acc, X_val, yv_idx) -> EpochRecord:
        task, lb, total = (float(v) for v in means)
        # X_val is already standardized here, so bypass the public routing()
        cfg = self.config_.with_mode(Mode.TRAINING)
        soft = route(gate_logits(X_val, self.bank_, cfg), cfg)
        hard = route(soft.logits, self.config_.with_mode(Mode.INFERENCE))
        pred = self._predict_idx(X_val, count=False)
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            task_loss=task,
            lb_loss=lb,
            total_loss=total,
            train_acc=train_acc,
            val_acc=float((pred == yv_idx).mean()),
            entropy_train_bits=routing_entropy(soft),
            entropy_infer_bits=routing_entropy(hard),
            mu=utilization(soft),
        )

    def _block(self, X, mode: Mode, count: bool = True, chunk: int = 256) -> tuple[np.ndarray, RoutingOutcome]:
        cfg = self.config_.with_mode(mode)
        counter = self.expert_counter_ if count else None
        outs, routings = [], []
        for s in range(0, X.shape[0], chunk):
            y_b, r_b = esmoe_forward(X[s : s + chunk], self.bank_, cfg, counter)
            outs.append(y_b)
            routings.append(r_b)
        routing = RoutingOutcome(
            *(np.concatenate([getattr(r, f) for r in routings]) for f in ("logits", "probs", "selected", "weights", "mask")),
            mode=mode,
        )
        return np.concatenate(outs), routing

    def _logits(self, X, mode: Mode = Mode.INFERENCE, count: bool = True) -> np.ndarray:
        y_block, _ = self._block(X, mode, count)
        return _head_forward(y_block, self.head_)[1]

    def _predict_idx(self, X, mode: Mode = Mode.INFERENCE, count: bool = True) -> np.ndarray:
        return self._logits(X, mode, count).argmax(axis=1)

    def _checked(self, X) -> np.ndarray:
        return self.preprocess(check_images(X, self.n_features_in_))

    def decision_function(self, X, mode: Mode | str = Mode.INFERENCE) -> np.ndarray:
        check_is_fitted(self)
        return self._logits(self._checked(X), Mode(mode))

    def predict_proba(self, X, mode: Mode | str = Mode.INFERENCE) -> np.ndarray:
        return softmax(self.decision_function(X, mode), axis=1)

    def predict(self, X, mode: Mode | str = Mode.INFERENCE) -> np.ndarray:
        scores = self.decision_function(X, mode)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pooled block features ``(N, out_channels)`` under hard Top-K routing."""
        check_is_fitted(self)
        y_block, _ = self._block(self._checked(X), Mode.INFERENCE)
        return y_block.astype(np.float64).mean(axis=(2, 3))

    def routing(self, X, mode: Mode | str = Mode.INFERENCE) -> RoutingOutcome:
        """Routing decisions only; no expert is evaluated."""
        check_is_fitted(self)
        X = self._checked(X)
        cfg = self.config_.with_mode(Mode(mode))
        return route(gate_logits(X, self.bank_, cfg), cfg)

    def __sklearn_is_fitted__(self):
        return hasattr(self, "bank_")
