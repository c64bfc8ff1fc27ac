"""Adam with decoupled weight decay and a round-indexed step decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    weight_decay: float = 1e-4
    decay_rounds: tuple[int, ...] = (5, 10)
    decay_factor: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    round: int = 0  # set by the training loop; drives the lr decay
    # explicit lr per decay phase; overrides lr * decay_factor**k when given
    lr_values: tuple[float, ...] | None = None

    @classmethod
    def for_params(cls, params: np.ndarray, **kwargs) -> "OptState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kwargs)

    def current_lr(self) -> float:
        crossed = sum(1 for r in self.decay_rounds if self.round >= r)
        if self.lr_values:
            return self.lr_values[min(crossed, len(self.lr_values) - 1)]
        return self.lr * self.decay_factor ** crossed

    def reset(self) -> None:
        """Fresh moments, as if training started over."""
        self.m = np.zeros_like(self.m)
        self.v = np.zeros_like(self.v)
        self.step = 0


def adam_step(model, opt: OptState, grads: np.ndarray, mask=None):
    """One in-place Adam update of ``model.params``; returns ``(model, opt)``.

    Weight decay is decoupled (AdamW style) and skips pruned positions, which
    are forced back to exactly zero after the update.
    """
    params = model.params
    if grads.shape != params.shape or opt.m.shape != params.shape:
        raise AlignmentError("params, gradients and optimizer moments must have equal length")
    pruned = None
    if mask is not None:
        bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
        idx = model.arch.prunable_index
        if bits.shape != idx.shape:
            raise AlignmentError(f"mask has {bits.size} bits, model has {idx.size} prunable weights")
        pruned = idx[~bits]

    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    opt.m = b1 * opt.m + (1 - b1) * grads
    opt.v = b2 * opt.v + (1 - b2) * grads * grads
    m_hat = opt.m / (1 - b1 ** opt.step)
    v_hat = opt.v / (1 - b2 ** opt.step)
    lr = opt.current_lr()
    update = lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    if opt.weight_decay:
        update = update + lr * opt.weight_decay * params
    params -= update.astype(params.dtype, copy=False)
    if pruned is not None and pruned.size:
        params[pruned] = 0
    return model, opt
