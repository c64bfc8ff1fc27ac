"""Minibatch training with per-epoch validation and early stopping."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .nn import Batch, DenseModel, forward, loss_and_grad, update_running_stats
from .optim import OptState, adam_step

DEFAULT_PATIENCE = 3


def val_mse(model: DenseModel, x: np.ndarray, y: np.ndarray) -> float:
    pred = forward(model, x, training=False)
    return float(np.mean((pred.astype(np.float64) - y) ** 2))


def fit(model: DenseModel, opt: OptState, mask, x_train: np.ndarray, y_train: np.ndarray,
        x_val: np.ndarray, y_val: np.ndarray, epochs: int, batch_size: int,
        rng: np.random.Generator, patience: int | None = DEFAULT_PATIENCE,
        decay_by_epoch: bool = False) -> list[float]:
    """Train in place and return the validation MSE after each epoch.

    Stops once validation loss has not improved for ``patience`` epochs. With
    ``decay_by_epoch`` the learning-rate decay points count epochs, not rounds.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (batchnorm needs batch statistics)")
    n = len(y_train)
    if n < 2:
        raise DataError("need at least 2 training samples")
    if len(y_val) == 0:
        raise DataError("empty validation set")

    losses: list[float] = []
    best, stale = np.inf, 0
    for epoch in range(epochs):
        if decay_by_epoch:
            opt.round = epoch
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            _, grads, stats = loss_and_grad(model, Batch(x_train[idx], y_train[idx]), mask)
            update_running_stats(model, stats)
            adam_step(model, opt, grads, mask)
        loss = val_mse(model, x_val, y_val)
        losses.append(loss)
        if loss < best:
            best, stale = loss, 0
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break
    return losses


def train_epochs(client, epochs: int, batch_size: int, rng: np.random.Generator | None = None,
                 patience: int | None = DEFAULT_PATIENCE):
    """Train a client's model on its own data; appends per-epoch losses to ``client.epoch_losses``."""
    if client.data.n_train == 0:
        raise DataError(f"client {client.id} has no training data")
    if rng is None:
        rng = np.random.default_rng(0)
    d = client.data
    losses = fit(client.model, client.opt, client.mask, d.x_train, d.y_train, d.x_val, d.y_val,
                 epochs, batch_size, rng, patience)
    client.epoch_losses.extend(losses)
    return client
