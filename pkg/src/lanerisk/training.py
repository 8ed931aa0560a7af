"""Cross-entropy loss, Adam with step decay, and the supervised training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(probs, target) -> float:
    """Categorical cross-entropy with probabilities clamped to ``[1e-12, 1]``."""
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, 1.0)
    return float(-np.sum(np.asarray(target, dtype=np.float64) * np.log(probs)))


def _batch_loss_and_grad(probs, targets):
    """Mean loss over the batch and its gradient with respect to ``probs``."""
    clipped = np.clip(probs, PROB_FLOOR, 1.0)
    n = probs.shape[0]
    losses = -np.sum(targets * np.log(clipped), axis=1)
    inside = (probs >= PROB_FLOOR) & (probs <= 1.0)
    grad = np.where(inside, -targets / clipped, 0.0) / n
    return float(losses.mean()), grad


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor.

    The effective rate at update ``t`` (counting from zero) is
    ``lr / (1 + decay * t)``.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, **kwargs):
        return cls(np.zeros_like(param), np.zeros_like(param), **kwargs)

    @property
    def current_lr(self) -> float:
        return self.lr / (1.0 + self.decay * self.t)


def adam_update(state: AdamState, param, grad) -> np.ndarray:
    """Apply one Adam step; returns the new parameter and advances ``state``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adam: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    lr_t = state.current_lr
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - lr_t * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over every parameter of a model, updating tensors in place."""

    def __init__(self, model, lr=1e-4, decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.states = {
            name: AdamState.for_param(p, lr=lr, decay=decay, beta1=beta1, beta2=beta2, eps=eps)
            for name, p in model.named_params()
        }

    def step(self):
        params = dict(self.model.named_params())
        for name, grad in self.model.named_grads():
            p = params[name]
            p[...] = adam_update(self.states[name], p, grad)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1000
    split: float = 0.9
    seed: int = 0
    lr: float = 1e-4
    decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # frame-level models see one row per frame; divide their epochs by the
    # frames per clip so every family gets a comparable optimizer step count
    match_steps: bool = False

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {self.split}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0 or self.decay < 0:
            raise ConfigError(f"need lr > 0 and decay >= 0, got lr={self.lr}, decay={self.decay}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None
    val_accuracy: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    @property
    def train_loss(self):
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self):
        return [r.val_loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)]
                )


def replicate_frame_labels(clip_label, frames) -> list:
    """Give every frame of a clip the clip's label."""
    label = np.asarray(clip_label, dtype=np.float64)
    return [label.copy() for _ in frames]


def _class_of(sample) -> int:
    return int(np.argmax(sample.y))


def stratified_split(labels, split, rng):
    """Split indices so both classes reach both sides where possible."""
    labels = np.asarray(labels)
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_val = int(math.floor((1.0 - split) * n + 0.5))
        n_val = min(max(n_val, 1 if n >= 2 else 0), max(n - 1, 0))
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return sorted(train), sorted(val)


def _expand(samples, frame_level):
    """Stack samples into ``(X, Y)``; frame-level models get one row per frame."""
    if frame_level:
        xs, ys = [], []
        for s in samples:
            xs.extend(s.x)
            ys.extend(replicate_frame_labels(s.y, s.x))
        return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    x = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
    y = np.stack([np.asarray(s.y, dtype=np.float64) for s in samples])
    return x, y


def batch_gradients(model, x, y):
    """Mean loss and a copy of the parameter gradients for one batch."""
    probs = model.forward(x, training=True)
    loss, grad = _batch_loss_and_grad(probs, y)
    model.backward(grad)
    return loss, {name: g.copy() for name, g in model.named_grads()}


def evaluate(model, x, y, batch_size=64):
    """Mean cross-entropy and accuracy in inference mode."""
    probs = model.predict_proba(x, batch_size)
    loss, _ = _batch_loss_and_grad(probs, y)
    acc = float(np.mean(np.argmax(probs, axis=1) == np.argmax(y, axis=1)))
    return loss, acc


def train(model, samples, config: TrainConfig, on_epoch=None):
    """Fit ``model`` on ``samples``; return ``(model, history)``.

    The samples are split once (seeded, stratified) into train/validation;
    each epoch reshuffles the training part and walks it in mini-batches.
    Frame-level models train on individual frames carrying their clip's label.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ConfigError(f"training needs at least 2 samples, got {len(samples)}")
    rng = np.random.default_rng(config.seed)
    labels = [_class_of(s) for s in samples]
    train_idx, val_idx = stratified_split(labels, config.split, rng)
    if len({labels[i] for i in train_idx}) < 2:
        raise ConfigError("training split holds a single class; both classes are required")
    history = History(
        train_ids=[samples[i].clip_id for i in train_idx],
        val_ids=[samples[i].clip_id for i in val_idx],
    )
    frame_level = getattr(model, "frame_level", False)
    x_train, y_train = _expand([samples[i] for i in train_idx], frame_level)
    x_val, y_val = (None, None)
    if val_idx:
        x_val, y_val = _expand([samples[i] for i in val_idx], frame_level)

    model.seed_dropout(np.random.default_rng([config.seed, 1]))
    opt = Adam(model, config.lr, config.decay, config.beta1, config.beta2, config.eps)
    n = len(x_train)
    epochs = config.epochs
    if frame_level and config.match_steps and epochs > 0:
        per_clip = max(n // len(train_idx), 1)
        epochs = max(1, -(-epochs // per_clip))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            probs = model.forward(x_train[batch], training=True)
            loss, grad = _batch_loss_and_grad(probs, y_train[batch])
            model.backward(grad)
            opt.step()
            total += loss * len(batch)
        record = EpochRecord(epoch, total / n)
        if x_val is not None:
            record.val_loss, record.val_accuracy = evaluate(model, x_val, y_val)
        history.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d train %.5f val %s", epoch, record.train_loss, record.val_loss)
    return model, history
