"""Small numpy network: 1D conv feature extractors feeding a dense regressor.

All parameters live in one flat vector. Each layer owns a contiguous slice
(weights first, then biases / batchnorm shift), so masks, optimizers and the
wire codec can work on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, ShapeError

LAYER_KINDS = ("dense", "conv1d", "relu", "batchnorm")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``n_in``/``n_out`` are features (dense) or channels (conv1d, batchnorm)."""

    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv1d", "batchnorm") and (self.n_in < 1 or self.n_out < 1):
            raise ConfigError(f"{self.kind} layer needs positive sizes, got {self.n_in}->{self.n_out}")
        if self.kind == "conv1d" and (self.kernel < 1 or self.stride < 1):
            raise ConfigError("conv1d needs kernel >= 1 and stride >= 1")
        if self.kind == "batchnorm" and self.n_in != self.n_out:
            raise ConfigError("batchnorm must preserve its feature count")

    @classmethod
    def dense(cls, n_in: int, n_out: int) -> "LayerSpec":
        return cls("dense", n_in, n_out)

    @classmethod
    def conv1d(cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> "LayerSpec":
        return cls("conv1d", in_channels, out_channels, kernel, stride)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls("relu")

    @classmethod
    def batchnorm(cls, n: int) -> "LayerSpec":
        return cls("batchnorm", n, n)

    @property
    def prunable(self) -> bool:
        return self.kind in ("dense", "conv1d")

    @property
    def n_weight(self) -> int:
        if self.kind == "dense":
            return self.n_in * self.n_out
        if self.kind == "conv1d":
            return self.n_out * self.n_in * self.kernel
        if self.kind == "batchnorm":
            return self.n_in  # scale
        return 0

    @property
    def n_bias(self) -> int:
        return self.n_out if self.kind in ("dense", "conv1d", "batchnorm") else 0

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one sample after this layer; ``shape`` is ``(F,)`` or ``(C, L)``."""
        if self.kind == "dense":
            size = int(np.prod(shape))
            if size != self.n_in:
                raise ConfigError(f"dense expects {self.n_in} inputs, previous layer gives {size}")
            return (self.n_out,)
        if self.kind == "conv1d":
            if len(shape) != 2 or shape[0] != self.n_in:
                raise ConfigError(f"conv1d expects ({self.n_in}, L) input, got {shape}")
            length = (shape[1] - self.kernel) // self.stride + 1
            if length < 1:
                raise ConfigError(f"conv1d kernel {self.kernel} longer than input length {shape[1]}")
            return (self.n_out, length)
        if self.kind == "batchnorm" and shape[0] != self.n_in:
            raise ConfigError(f"batchnorm over {self.n_in} features, got {shape[0]}")
        return shape


@dataclass(frozen=True)
class Branch:
    """Feature extractor over input columns ``[start, stop)``.

    The columns are read channel-major as a ``(channels, length)`` sequence.
    A branch without layers passes its columns straight to the regressor.
    """

    name: str
    start: int
    stop: int
    channels: int = 1
    layers: tuple[LayerSpec, ...] = ()

    @property
    def width(self) -> int:
        return self.stop - self.start

    @property
    def in_shape(self) -> tuple[int, ...]:
        if self.layers and self.layers[0].kind == "conv1d":
            if self.width % self.channels:
                raise ConfigError(f"branch {self.name}: {self.width} columns not divisible by {self.channels} channels")
            return (self.channels, self.width // self.channels)
        return (self.width,)


@dataclass(frozen=True)
class LayerSlot:
    spec: LayerSpec
    offset: int  # first flat index of this layer's parameters
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    @property
    def weight(self) -> slice:
        return slice(self.offset, self.offset + self.spec.n_weight)

    @property
    def bias(self) -> slice:
        start = self.offset + self.spec.n_weight
        return slice(start, start + self.spec.n_bias)

    @property
    def size(self) -> int:
        return self.spec.n_weight + self.spec.n_bias


@dataclass(frozen=True)
class Architecture:
    n_features: int
    branches: tuple[Branch, ...]
    trunk: tuple[LayerSpec, ...]

    def __post_init__(self):
        cols = sorted((b.start, b.stop) for b in self.branches)
        pos = 0
        for start, stop in cols:
            if start != pos or stop <= start:
                raise ConfigError("branches must tile the input columns without gaps or overlap")
            pos = stop
        if pos != self.n_features:
            raise ConfigError(f"branches cover {pos} columns, data has {self.n_features}")
        if not self.trunk:
            raise ConfigError("regressor needs at least one layer")
        if self.slots[-1].out_shape != (1,):
            raise ConfigError("network must end in a single output")

    @classmethod
    def sequential(cls, layers: Sequence[LayerSpec], input_shape: tuple[int, ...] | None = None) -> "Architecture":
        """Plain stack of layers over all input columns."""
        layers = tuple(layers)
        if not layers:
            raise ConfigError("empty layer list")
        if input_shape is None:
            if layers[0].kind != "dense":
                raise ConfigError("input_shape is required when the first layer is not dense")
            input_shape = (layers[0].n_in,)
        n_features = int(np.prod(input_shape))
        if len(input_shape) == 2:
            # conv stack: treat the whole input as one branch and use an empty trunk tail
            convs = []
            rest = list(layers)
            while rest and rest[0].kind != "dense":
                convs.append(rest.pop(0))
            branch = Branch("input", 0, n_features, input_shape[0], tuple(convs))
            return cls(n_features, (branch,), tuple(rest))
        return cls(n_features, (Branch("input", 0, n_features),), layers)

    @cached_property
    def slots(self) -> tuple[LayerSlot, ...]:
        out = []
        offset = 0
        for branch in self.branches:
            shape = branch.in_shape
            for spec in branch.layers:
                nxt = spec.out_shape(shape)
                out.append(LayerSlot(spec, offset, shape, nxt))
                offset += spec.n_weight + spec.n_bias
                shape = nxt
        shape = (self.branch_out_width,)
        for spec in self.trunk:
            nxt = spec.out_shape(shape)
            out.append(LayerSlot(spec, offset, shape, nxt))
            offset += spec.n_weight + spec.n_bias
            shape = nxt
        return tuple(out)

    @cached_property
    def branch_out_width(self) -> int:
        width = 0
        for branch in self.branches:
            shape = branch.in_shape
            for spec in branch.layers:
                shape = spec.out_shape(shape)
            width += int(np.prod(shape))
        return width

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.slots)

    @cached_property
    def prunable_index(self) -> np.ndarray:
        """Flat parameter indices of every prunable weight, in layer order."""
        parts = [np.arange(s.weight.start, s.weight.stop) for s in self.slots if s.spec.prunable]
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        idx.setflags(write=False)
        return idx

    @cached_property
    def prunable_layer_sizes(self) -> tuple[int, ...]:
        return tuple(s.spec.n_weight for s in self.slots if s.spec.prunable)

    @cached_property
    def prunable_offsets(self) -> tuple[int, ...]:
        return tuple(s.offset for s in self.slots if s.spec.prunable)

    @property
    def n_prunable(self) -> int:
        return int(sum(self.prunable_layer_sizes))

    def _layer_indices(self) -> list[list[int]]:
        groups, i = [], 0
        for branch in self.branches:
            groups.append(list(range(i, i + len(branch.layers))))
            i += len(branch.layers)
        groups.append(list(range(i, i + len(self.trunk))))
        return groups


def default_architecture(groups: Sequence[dict], hidden: Sequence[int] = (64, 32),
                         conv_channels: int = 4, kernel: int = 3, stride: int = 2) -> Architecture:
    """Conv block per temporal feature group, then dense layers ending in one output.

    ``groups`` is a list of ``{"name", "width", "channels", "temporal"}`` dicts in
    column order. Temporal groups get conv1d -> relu -> batchnorm; the others are
    passed through.
    """
    branches, start = [], 0
    for g in groups:
        width, ch = int(g["width"]), int(g.get("channels", 1))
        layers: tuple[LayerSpec, ...] = ()
        if g.get("temporal", False):
            layers = (LayerSpec.conv1d(ch, conv_channels, kernel, stride), LayerSpec.relu(),
                      LayerSpec.batchnorm(conv_channels))
        branches.append(Branch(g["name"], start, start + width, ch, layers))
        start += width
    width = 0
    for b in branches:
        shape = b.in_shape
        for spec in b.layers:
            shape = spec.out_shape(shape)
        width += int(np.prod(shape))
    trunk: list[LayerSpec] = []
    prev = width
    for h in hidden:
        trunk += [LayerSpec.dense(prev, h), LayerSpec.relu(), LayerSpec.batchnorm(h)]
        prev = h
    trunk.append(LayerSpec.dense(prev, 1))
    return Architecture(start, tuple(branches), tuple(trunk))


@dataclass
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.targets = np.asarray(self.targets).reshape(-1)
        if self.features.ndim != 2:
            raise ShapeError("features must be a (samples, features) matrix")
        if len(self.features) != len(self.targets):
            raise ShapeError("features and targets differ in length")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class DenseModel:
    arch: Architecture
    params: np.ndarray
    # running (mean, var) per batchnorm layer, keyed by slot index
    bn_state: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.params.shape != (self.arch.n_params,):
            raise AlignmentError(f"expected {self.arch.n_params} params, got {self.params.shape}")
        if not self.bn_state:
            for i, slot in enumerate(self.arch.slots):
                if slot.spec.kind == "batchnorm":
                    n = slot.spec.n_in
                    self.bn_state[i] = (np.zeros(n, self.params.dtype), np.ones(n, self.params.dtype))

    def copy(self) -> "DenseModel":
        return DenseModel(self.arch, self.params.copy(),
                          {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_state.items()})

    def astype(self, dtype) -> "DenseModel":
        return DenseModel(self.arch, self.params.astype(dtype),
                          {k: (m.astype(dtype), v.astype(dtype)) for k, (m, v) in self.bn_state.items()})

    @property
    def prunable_weights(self) -> np.ndarray:
        return self.params[self.arch.prunable_index]


def kaiming_init(layers: Architecture | Sequence[LayerSpec], seed: int, dtype=np.float32) -> DenseModel:
    """He-normal weights (variance 2/fan_in), zero biases, unit batchnorm scale."""
    arch = layers if isinstance(layers, Architecture) else Architecture.sequential(layers)
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.n_params, dtype=np.float64)
    for slot in arch.slots:
        spec = slot.spec
        if spec.prunable:
            fan_in = spec.n_in * (spec.kernel if spec.kind == "conv1d" else 1)
            params[slot.weight] = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.n_weight)
        elif spec.kind == "batchnorm":
            params[slot.weight] = 1.0
    return DenseModel(arch, params.astype(dtype))


# -- layer kernels ---------------------------------------------------------

def _conv_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(N, C, L) -> (N, L_out, C*K) im2col view."""
    n, c, length = x.shape
    l_out = (length - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride][:, :, :l_out]
    # win: (N, C, L_out, K)
    return win.transpose(0, 2, 1, 3).reshape(n, l_out, c * kernel)


def _layer_forward(spec: LayerSpec, slot: LayerSlot, params: np.ndarray, x: np.ndarray,
                   training: bool, running: tuple[np.ndarray, np.ndarray] | None):
    """Returns (output, cache, batch_stats)."""
    if spec.kind == "dense":
        x2 = x.reshape(len(x), -1)
        w = params[slot.weight].reshape(spec.n_out, spec.n_in)
        return x2 @ w.T + params[slot.bias], x2, None
    if spec.kind == "conv1d":
        cols = _conv_windows(x, spec.kernel, spec.stride)
        w = params[slot.weight].reshape(spec.n_out, spec.n_in * spec.kernel)
        y = cols @ w.T + params[slot.bias]  # (N, L_out, C_out)
        return y.transpose(0, 2, 1), (cols, x.shape), None
    if spec.kind == "relu":
        return np.maximum(x, 0), x > 0, None
    # batchnorm over batch (and length, for conv feature maps)
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    gamma = params[slot.weight].reshape(bshape)
    beta = params[slot.bias].reshape(bshape)
    stats = None
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        stats = (mean, unbiased)
    else:
        mean, var = running
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    return gamma * xhat + beta, (xhat, inv_std, axes, bshape), stats


def _layer_backward(spec: LayerSpec, slot: LayerSlot, params: np.ndarray, cache, dy: np.ndarray,
                    grads: np.ndarray, need_dx: bool = True):
    if spec.kind == "dense":
        x2 = cache
        w = params[slot.weight].reshape(spec.n_out, spec.n_in)
        grads[slot.weight] = (dy.T @ x2).reshape(-1)
        grads[slot.bias] = dy.sum(axis=0)
        return (dy @ w).reshape(len(dy), *slot.in_shape) if need_dx else None
    if spec.kind == "conv1d":
        cols, xshape = cache
        dy_t = dy.transpose(0, 2, 1)  # (N, L_out, C_out)
        w = params[slot.weight].reshape(spec.n_out, spec.n_in * spec.kernel)
        grads[slot.weight] = np.einsum("nlo,nlk->ok", dy_t, cols).reshape(-1)
        grads[slot.bias] = dy_t.sum(axis=(0, 1))
        if not need_dx:
            return None
        dcols = (dy_t @ w).reshape(dy.shape[0], dy.shape[2], spec.n_in, spec.kernel)
        dx = np.zeros(xshape, dtype=dy.dtype)
        l_out = dy.shape[2]
        stop = spec.stride * (l_out - 1) + 1
        for k in range(spec.kernel):
            dx[:, :, k:k + stop:spec.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx
    if spec.kind == "relu":
        return dy * cache
    xhat, inv_std, axes, bshape = cache
    gamma = params[slot.weight].reshape(bshape)
    grads[slot.weight] = (dy * xhat).sum(axis=axes)
    grads[slot.bias] = dy.sum(axis=axes)
    dxhat = dy * gamma
    m = dy.size // dy.shape[1]
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)


# -- whole-network passes --------------------------------------------------

def _as_features(model: DenseModel, batch) -> np.ndarray:
    x = batch.features if isinstance(batch, Batch) else np.asarray(batch)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.arch.n_features:
        raise ShapeError(f"model takes {model.arch.n_features} features, got shape {x.shape}")
    return x.astype(model.params.dtype, copy=False)


def _run_forward(model: DenseModel, x: np.ndarray, training: bool):
    arch, params = model.arch, model.params
    slots = arch.slots
    groups = arch._layer_indices()
    caches: dict[int, object] = {}
    stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    outs = []
    for branch, idxs in zip(arch.branches, groups[:-1]):
        h = x[:, branch.start:branch.stop].reshape(len(x), *branch.in_shape)
        for i in idxs:
            h, caches[i], st = _layer_forward(slots[i].spec, slots[i], params, h, training, model.bn_state.get(i))
            if st is not None:
                stats[i] = st
        outs.append(h.reshape(len(x), -1))
    h = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
    for i in groups[-1]:
        h, caches[i], st = _layer_forward(slots[i].spec, slots[i], params, h, training, model.bn_state.get(i))
        if st is not None:
            stats[i] = st
    return h.reshape(-1), caches, stats


def forward(model: DenseModel, batch, training: bool = False) -> np.ndarray:
    """Predictions for every sample.

    In training mode batchnorm normalises with the batch statistics; otherwise
    the running statistics are used. Running statistics are never updated here
    (see :func:`update_running_stats`).
    """
    x = _as_features(model, batch)
    if training and len(x) < 2 and model.bn_state:
        raise ShapeError("batchnorm in training mode needs at least 2 samples")
    return _run_forward(model, x, training)[0]


def loss_rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ShapeError("RMSE of an empty vector is undefined")
    if p.shape != t.shape:
        raise ShapeError(f"predictions {p.shape} and targets {t.shape} differ")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _check_mask(model: DenseModel, mask) -> np.ndarray | None:
    if mask is None:
        return None
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bits.shape != (model.arch.n_prunable,):
        raise AlignmentError(f"mask has {bits.size} bits, model has {model.arch.n_prunable} prunable weights")
    return bits


def loss_and_grad(model: DenseModel, batch: Batch, mask=None):
    """MSE loss, its gradient w.r.t. the flat params, and batchnorm batch statistics.

    Gradient entries at pruned positions are exactly zero.
    """
    bits = _check_mask(model, mask)
    x = _as_features(model, batch)
    y = np.asarray(batch.targets, dtype=model.params.dtype).reshape(-1)
    if len(y) != len(x):
        raise ShapeError("features and targets differ in length")
    pred, caches, stats = _run_forward(model, x, training=True)
    diff = pred - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    arch, params = model.arch, model.params
    slots = arch.slots
    groups = arch._layer_indices()
    grads = np.zeros_like(params)
    dh = (2.0 / len(y) * diff).reshape(-1, 1).astype(params.dtype)
    for i in reversed(groups[-1]):
        dh = _layer_backward(slots[i].spec, slots[i], params, caches[i], dh, grads)
    dh = dh.reshape(len(x), -1)
    col = 0
    for branch, idxs in zip(arch.branches, groups[:-1]):
        shape = branch.in_shape
        for i in idxs:
            shape = slots[i].out_shape
        width = int(np.prod(shape))
        dseg = dh[:, col:col + width].reshape(len(x), *shape)
        col += width
        for pos, i in enumerate(reversed(idxs)):
            dseg = _layer_backward(slots[i].spec, slots[i], params, caches[i], dseg, grads,
                                   need_dx=pos < len(idxs) - 1)
    if bits is not None:
        grads[arch.prunable_index[~bits]] = 0
    return loss, grads, stats


def backward(model: DenseModel, batch: Batch, mask=None) -> np.ndarray:
    """Gradient of the mean squared error w.r.t. every parameter."""
    return loss_and_grad(model, batch, mask)[1]


def update_running_stats(model: DenseModel, stats: dict, momentum: float = BN_MOMENTUM) -> None:
    for i, (mean, var) in stats.items():
        rm, rv = model.bn_state[i]
        model.bn_state[i] = ((1 - momentum) * rm + momentum * mean.astype(rm.dtype),
                             (1 - momentum) * rv + momentum * var.astype(rv.dtype))


def evaluate_rmse(model: DenseModel, features: np.ndarray, targets: np.ndarray) -> float:
    return loss_rmse(forward(model, features, training=False), targets)
