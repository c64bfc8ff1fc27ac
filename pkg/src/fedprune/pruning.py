"""Binary masks over prunable weights and global magnitude pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError
from .nn import Architecture, DenseModel
from .optim import OptState


@dataclass(frozen=True, eq=False)
class Mask:
    """One bit per prunable weight (1 = surviving), in the model's layer order."""

    bits: np.ndarray
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 1 or bits.size != sum(self.layer_sizes):
            raise AlignmentError(f"{bits.size} bits do not cover layers {self.layer_sizes}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def ones(cls, arch: Architecture) -> "Mask":
        return cls(np.ones(arch.n_prunable, dtype=bool), arch.prunable_layer_sizes)

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return (isinstance(other, Mask) and self.layer_sizes == other.layer_sizes
                and bool(np.array_equal(self.bits, other.bits)))

    @property
    def layer_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.layer_sizes)), self.layer_sizes)

    def check(self, model: DenseModel) -> None:
        if self.layer_sizes != model.arch.prunable_layer_sizes:
            raise AlignmentError("mask layout does not match the model's prunable layers")


@dataclass(frozen=True)
class SparsityReport:
    p_m: float  # fraction of prunable weights that are pruned
    per_layer: tuple[float, ...]
    surviving: int


@dataclass(frozen=True, eq=False)
class InitSnapshot:
    """Round-0 parameters, kept for lottery-ticket resets."""

    params: np.ndarray

    @classmethod
    def capture(cls, model: DenseModel) -> "InitSnapshot":
        p = model.params.copy()
        p.setflags(write=False)
        return cls(p)


def sparsity(mask: Mask) -> SparsityReport:
    n = len(mask)
    surviving = int(mask.bits.sum())
    per_layer, start = [], 0
    for size in mask.layer_sizes:
        seg = mask.bits[start:start + size]
        per_layer.append(float(1.0 - seg.mean()) if size else 0.0)
        start += size
    return SparsityReport((n - surviving) / n if n else 0.0, tuple(per_layer), surviving)


def magnitude_prune(model: DenseModel, mask: Mask, p: float) -> Mask:
    """Prune ``floor(p * surviving)`` of the smallest-magnitude surviving weights, globally.

    Ties are broken by ascending index. The last survivor of a layer is never
    pruned; the next-smallest candidate is taken instead.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"pruning rate must lie in (0, 1), got {p}")
    mask.check(model)
    bits = mask.bits
    layer_ids = mask.layer_ids
    remaining = np.bincount(layer_ids[bits], minlength=len(mask.layer_sizes))
    if np.any(remaining == 0):
        raise ConfigError("every prunable layer needs at least one surviving weight")

    surv = np.flatnonzero(bits)
    k = int(np.floor(p * surv.size))
    if k == 0:
        return mask
    mag = np.abs(model.prunable_weights[surv].astype(np.float64))
    order = surv[np.lexsort((surv, mag))]

    chosen = order[:k]
    lost = np.bincount(layer_ids[chosen], minlength=len(remaining))
    if np.any(lost >= remaining):
        # slow path: walk candidates and skip each layer's last survivor
        picked = []
        left = remaining.copy()
        for i in order:
            lid = layer_ids[i]
            if left[lid] > 1:
                left[lid] -= 1
                picked.append(i)
                if len(picked) == k:
                    break
        chosen = np.asarray(picked, dtype=np.int64)

    new = bits.copy()
    new[chosen] = False
    return Mask(new, mask.layer_sizes)


def apply_mask(model: DenseModel, mask: Mask, inplace: bool = False) -> DenseModel:
    """Zero every pruned weight. Biases and batchnorm parameters are untouched."""
    mask.check(model)
    out = model if inplace else model.copy()
    out.params[model.arch.prunable_index[~mask.bits]] = 0
    return out


def reset_to_init(model: DenseModel, snapshot: InitSnapshot, mask: Mask,
                  opt: OptState | None = None, inplace: bool = False) -> DenseModel:
    """Rewind parameters to their round-0 values, keeping pruned weights at zero.

    When ``opt`` is given its moments are cleared so training restarts fresh.
    """
    if snapshot.params.shape != model.params.shape:
        raise AlignmentError("snapshot and model have different parameter counts")
    out = model if inplace else model.copy()
    out.params[:] = snapshot.params
    apply_mask(out, mask, inplace=True)
    if opt is not None:
        opt.reset()
    return out


def check_closure(model: DenseModel, mask: Mask) -> bool:
    """True when every pruned position holds exactly zero."""
    return not np.any(model.params[model.arch.prunable_index[~mask.bits]])
