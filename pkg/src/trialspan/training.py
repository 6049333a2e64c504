"""MSE training with Adam: minibatching, gradient checks, checkpoints.

The loop owns one mutable copy of the parameters; everything else
(shuffling, dropout, init) is driven by explicit seeds, so two runs with
the same seeds produce bit-identical loss curves and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddedTrial
from .encoder import (
    ModelConfig,
    ModelParams,
    backward_batch,
    batch_arrays,
    forward_batch,
    init_params,
    save_checkpoint,
)
from .errors import EmptyDatasetError


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    shuffle_seed: int = 0
    phase_filter: Optional[int] = None  # train on a single phase
    early_stop: Optional[tuple[int, float]] = None  # (patience, validation fraction)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.phase_filter is not None and self.phase_filter not in (1, 2, 3, 4):
            raise ValueError("phase_filter must be 1..4")


@dataclass
class AdamState:
    """First/second moment accumulators congruent to the parameter arrays."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(arr) for name, arr in params.items()},
            v={name: np.zeros_like(arr) for name, arr in params.items()},
        )


def mse_loss(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError(f"need equal non-empty shapes, got {preds.shape} vs {targets.shape}")
    diff = targets - preds
    return float(np.mean(diff * diff))


def batch_labels(trials: list[EmbeddedTrial]) -> np.ndarray:
    labels = []
    for t in trials:
        if t.label is None:
            raise ValueError(f"trial {t.nct_id} has no duration label")
        labels.append(t.label)
    return np.asarray(labels, dtype=np.float64)


def loss_and_gradients(params: ModelParams, batch: list[EmbeddedTrial],
                       dropout_rng=None, train_mode: bool = True):
    """Mean squared error over the batch and its exact parameter gradients.

    Dropout masks (when active) are drawn once here and shared by the
    forward and backward passes.
    """
    if not batch:
        raise EmptyDatasetError("gradient computation needs a non-empty batch")
    y = batch_labels(batch)
    yhat, cache = forward_batch(params, *batch_arrays(batch),
                                train_mode=train_mode, rng=dropout_rng)
    loss = mse_loss(yhat, y)
    dyhat = 2.0 * (yhat - y) / len(batch)
    grads = backward_batch(params, cache, dyhat)
    return loss, grads


def gradients(params: ModelParams, batch: list[EmbeddedTrial],
              dropout_rng=None, train_mode: bool = True) -> dict[str, np.ndarray]:
    return loss_and_gradients(params, batch, dropout_rng, train_mode)[1]


def adam_step(state: AdamState, params, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to the parameters in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, arr in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state, params


def finite_difference_grads(params: ModelParams, batch: list[EmbeddedTrial],
                            h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference loss gradients; touches only the forward pass.

    Slow (two forward passes per parameter) and meant for verifying the
    analytic gradients on small models with dropout off.
    """
    y = batch_labels(batch)
    arrays = batch_arrays(batch)

    def loss_at(flat):
        p = ModelParams.from_flat(params.config, flat)
        yhat, _ = forward_batch(p, *arrays, train_mode=False)
        return mse_loss(yhat, y)

    flat = params.to_flat()
    grad_flat = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at(flat)
        flat[i] = orig - h
        down = loss_at(flat)
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)

    grads = {}
    offset = 0
    for name, arr in params.items():
        grads[name] = grad_flat[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return grads


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mae: Optional[float] = None


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_params: Optional[ModelParams] = None
    best_val_mae: Optional[float] = None


def train(model_config: ModelConfig, train_config: TrainConfig,
          trials: list[EmbeddedTrial],
          checkpoint_path: Optional[str | Path] = None,
          best_checkpoint_path: Optional[str | Path] = None) -> TrainResult:
    """Shuffled minibatch Adam on the embedded training set.

    With ``early_stop=(patience, fraction)`` the last ``fraction`` of the
    given list is held out for validation MAE (callers who want a temporal
    validation tail should pass trials ordered by start date) and training
    stops after ``patience`` epochs without improvement; the best-validation
    parameters are kept alongside the final ones.
    """
    if train_config.phase_filter is not None:
        trials = [t for t in trials if t.phase == train_config.phase_filter]
    if not trials:
        raise EmptyDatasetError("no trials to train on after filtering")

    val: list[EmbeddedTrial] = []
    train_set = list(trials)
    patience = None
    if train_config.early_stop is not None:
        patience, fraction = train_config.early_stop
        n_val = int(round(len(trials) * fraction))
        if n_val > 0:
            train_set, val = trials[:-n_val], trials[-n_val:]
        if not train_set:
            raise EmptyDatasetError("validation fraction leaves no training data")

    params = init_params(model_config)
    state = AdamState.init(params)
    shuffle_rng = np.random.default_rng(train_config.shuffle_seed)
    dropout_rng = np.random.default_rng([train_config.shuffle_seed, 0xD120])

    history: list[EpochStats] = []
    best_val = math.inf
    best_params = None
    stale = 0
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for start in range(0, len(train_set), train_config.batch_size):
            batch = [train_set[i] for i in order[start:start + train_config.batch_size]]
            loss, grads = loss_and_gradients(params, batch, dropout_rng, train_mode=True)
            adam_step(state, params, grads, train_config.lr,
                      train_config.beta1, train_config.beta2, train_config.eps)
            total += loss * len(batch)
            seen += len(batch)
        stats = EpochStats(epoch=epoch, train_mse=total / seen)

        if val:
            y = batch_labels(val)
            yhat, _ = forward_batch(params, *batch_arrays(val), train_mode=False)
            stats.val_mae = float(np.mean(np.abs(yhat - y)))
            if stats.val_mae < best_val:
                best_val = stats.val_mae
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
        history.append(stats)
        if val and patience is not None and stale >= patience:
            break

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    if best_checkpoint_path is not None and best_params is not None:
        save_checkpoint(best_params, best_checkpoint_path)
    return TrainResult(
        params=params,
        history=history,
        best_params=best_params,
        best_val_mae=None if not val else best_val,
    )


def write_loss_csv(history: list[EpochStats], path: str | Path) -> None:
    """Loss curve as CSV rows (epoch, train_mse, val_mae)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_mse,val_mae\n")
        for row in history:
            val = "" if row.val_mae is None else repr(row.val_mae)
            fh.write(f"{row.epoch},{row.train_mse!r},{val}\n")
