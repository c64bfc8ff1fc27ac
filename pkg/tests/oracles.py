"""Independent reference computations used by the tests."""

import numpy as np

from fedprune.nn import Architecture, Batch, Branch, LayerSpec, _run_forward, forward


def mse(model, batch):
    pred = forward(model, batch, training=True)
    return float(np.mean((pred - batch.targets) ** 2))


def relu_pattern(model, batch):
    """Concatenated on/off pattern of every ReLU unit over the batch."""
    _, caches, _ = _run_forward(model, np.asarray(batch.features, dtype=model.params.dtype), True)
    parts = [caches[i].reshape(-1) for i, s in enumerate(model.arch.slots) if s.spec.kind == "relu"]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


class KinkCrossed(Exception):
    """A +-h step flipped a ReLU, so the difference quotient straddles a kink."""


def central_diff_grad(model, batch, h=1e-3, mask=None, check_kinks=False):
    """Central finite differences of the training-mode MSE, one coordinate at a time."""
    params = model.params
    grad = np.zeros_like(params)
    base = relu_pattern(model, batch) if check_kinks else None
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        plus = mse(model, batch)
        if check_kinks and not np.array_equal(relu_pattern(model, batch), base):
            params[i] = old
            raise KinkCrossed(i)
        params[i] = old - h
        minus = mse(model, batch)
        if check_kinks and not np.array_equal(relu_pattern(model, batch), base):
            params[i] = old
            raise KinkCrossed(i)
        params[i] = old
        grad[i] = (plus - minus) / (2 * h)
    if mask is not None:
        grad[model.arch.prunable_index[~np.asarray(mask.bits)]] = 0
    return grad


def max_rel_error(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_architecture(rng, max_params=500):
    """Random conv + passthrough + dense network with every layer kind, at most ``max_params``."""
    while True:
        ch = int(rng.integers(1, 3))
        length = int(rng.integers(5, 9))
        out_ch = int(rng.integers(2, 4))
        kernel = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        extra = int(rng.integers(1, 4))
        hidden = int(rng.integers(3, 9))
        conv = Branch("seq", 0, ch * length, ch, (
            LayerSpec.conv1d(ch, out_ch, kernel, stride), LayerSpec.relu(), LayerSpec.batchnorm(out_ch)))
        flat = Branch("flat", ch * length, ch * length + extra)
        l_out = (length - kernel) // stride + 1
        width = out_ch * l_out + extra
        trunk = (LayerSpec.dense(width, hidden), LayerSpec.relu(), LayerSpec.batchnorm(hidden),
                 LayerSpec.dense(hidden, 1))
        arch = Architecture(ch * length + extra, (conv, flat), trunk)
        if arch.n_params <= max_params:
            return arch


def random_batch(rng, n_features, n=16):
    return Batch(rng.normal(size=(n, n_features)), rng.normal(size=n))


def brute_force_localized(uploads, previous, prunable_index):
    """Per-position mean over the clients that kept it, written as plain loops."""
    prunable = {int(p): j for j, p in enumerate(prunable_index)}
    out = []
    for i in range(len(previous)):
        if i in prunable:
            vals = [float(p[i]) for p, m in uploads if m.bits[prunable[i]]]
        else:
            vals = [float(p[i]) for p, _ in uploads]
        if vals:
            acc = 0.0
            for v in vals:
                acc += v
            out.append(acc / len(vals))
        else:
            out.append(float(previous[i]))
    return np.array(out, dtype=np.float64).astype(previous.dtype)
