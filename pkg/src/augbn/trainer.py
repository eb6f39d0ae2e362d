"""SGD training of the reference architectures, with hand-written backprop.

Batch norm normalizes with biased batch statistics while training and tracks
running statistics as ``running = (1 - m) * running + m * batch``.

Layer kernels here keep their input dtype so gradients can be checked against
finite differences in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from augbn.augment import apply_color_jitter
from augbn.errors import ConfigError
from augbn.model import ModelGraph, build_reference_model
from augbn.tensor import ChannelStats, _conv2d, _use_shift, conv_chunk_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bn_momentum: float = 0.1
    lr_schedule: str = "cosine"
    seed: int = 0
    ghost_batch: int = 0  # rows per BN statistics group; 0 uses the whole batch

    def __post_init__(self):
        if self.ghost_batch < 0:
            raise ConfigError("ghost_batch must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate, momentum and weight_decay must be non-negative")
        if not 0 < self.bn_momentum < 1:
            raise ConfigError("bn_momentum must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant" or total <= 1:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1 + math.cos(math.pi * step / total))


# Layer kernels -----------------------------------------------------------------


def conv_forward(x, w, b, stride: int, pad: int):
    """Returns (y, cache); the cache holds one entry per cache-sized row chunk."""
    rows = conv_chunk_rows(x.shape, pad, x.itemsize)
    ys, caches = [], []
    for s in range(0, x.shape[0], rows):
        xs = x[s : s + rows]
        y, padded = _conv2d(xs, w, b, stride, pad, keep_input=True)
        ys.append(y)
        caches.append((padded, w, stride, pad, xs.shape))
    return (ys[0] if len(ys) == 1 else np.concatenate(ys)), caches


def conv_backward(dy, cache):
    dxs, dw, db, start = [], 0, 0, 0
    for part in cache:
        n = part[4][0]
        dx_i, dw_i, db_i = _conv_backward_block(dy[start : start + n], part)
        dxs.append(dx_i)
        dw, db, start = dw + dw_i, db + db_i, start + n
    return (dxs[0] if len(dxs) == 1 else np.concatenate(dxs)), dw, db


def _conv_backward_block(dy, cache):
    padded, w, stride, pad, xshape = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    _, _, ho, wo = dy.shape
    _, _, hp, wp = padded.shape
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh, kw, Cin, Cout)
    dw = np.zeros_like(w)
    if _use_shift(stride, h, wd):
        # Mirror of the forward shifted GEMM on the flattened padded grid.
        size = n * hp * wp
        dgrid = np.zeros((cout, n, hp, wp), dtype=dy.dtype)
        dgrid[:, :, :ho, :wo] = dy.transpose(1, 0, 2, 3)
        dflat = dgrid.reshape(cout, size)
        xflat = padded.reshape(cin, size)
        dbuf = np.zeros((cin, size), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                dw[:, :, i, j] = dflat[:, : size - off] @ xflat[:, off:].T
                dbuf[:, off:] += taps_t[i, j] @ dflat[:, : size - off]
        dpad = dbuf.reshape(cin, n, hp, wp)
        db = dflat.sum(axis=1)
    else:
        dflat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(cout, -1)
        dpad = np.zeros(padded.shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                rs = slice(i, i + stride * (ho - 1) + 1, stride)
                cs = slice(j, j + stride * (wo - 1) + 1, stride)
                patch = padded[:, :, rs, cs].reshape(cin, -1)
                dw[:, :, i, j] = dflat @ patch.T
                dpad[:, :, rs, cs] += (taps_t[i, j] @ dflat).reshape(cin, n, ho, wo)
        db = dflat.sum(axis=1)
    dx = np.ascontiguousarray(dpad[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3))
    return dx, dw, db


def _bn_group_forward(x, gamma, beta, eps: float):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.astype(x.dtype)[:, None, None]) * inv_std.astype(x.dtype)[:, None, None]
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y.astype(x.dtype, copy=False), (xhat, gamma, inv_std), (mean, var)


def _bn_group_backward(dy, cache):
    xhat, gamma, inv_std = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    coef = (gamma.astype(np.float64) * inv_std / m).astype(dy.dtype)
    dx = coef[:, None, None] * (
        m * dy - dbeta.astype(dy.dtype)[:, None, None] - xhat * dgamma.astype(dy.dtype)[:, None, None]
    )
    return dx, dgamma, dbeta


def bn_train_forward(x, gamma, beta, eps: float, ghost: int = 0):
    """Batch norm with batch statistics.

    ``ghost > 0`` normalizes each run of ``ghost`` consecutive rows with its own
    statistics (ghost batch norm); the returned stats are the group averages.
    """
    n = x.shape[0]
    if not ghost or ghost >= n:
        y, cache, stats = _bn_group_forward(x, gamma, beta, eps)
        return y, [cache], stats
    y = np.empty_like(x)
    caches, means, variances = [], [], []
    for start in range(0, n, ghost):
        part = slice(start, start + ghost)
        y[part], cache, (mean, var) = _bn_group_forward(x[part], gamma, beta, eps)
        caches.append(cache)
        means.append(mean)
        variances.append(var)
    return y, caches, (np.mean(means, axis=0), np.mean(variances, axis=0))


def bn_train_backward(dy, caches):
    if len(caches) == 1:
        dx, dgamma, dbeta = _bn_group_backward(dy, caches[0])
    else:
        dx = np.empty_like(dy)
        dgamma = dbeta = 0.0
        start = 0
        for cache in caches:
            stop = start + cache[0].shape[0]
            dx[start:stop], dg, db = _bn_group_backward(dy[start:stop], cache)
            dgamma, dbeta = dgamma + dg, dbeta + db
            start = stop
    gamma = caches[0][1]
    return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def relu_backward(dy, x):
    return dy * (x > 0)


def _window_slices(k: int, stride: int, out: int):
    for i in range(k):
        yield i, slice(i, i + stride * (out - 1) + 1, stride)


def avgpool_backward(dy, xshape, k: int, stride: int):
    dx = np.zeros(xshape, dtype=dy.dtype)
    _, _, ho, wo = dy.shape
    for _, rs in _window_slices(k, stride, ho):
        for _, cs in _window_slices(k, stride, wo):
            dx[:, :, rs, cs] += dy / (k * k)
    return dx


def maxpool_forward(x, k: int, stride: int):
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(view.max(axis=(4, 5)))


def maxpool_backward(dy, x, y, k: int, stride: int):
    """Routes each output gradient to the first maximal input of its window."""
    dx = np.zeros_like(x)
    _, _, ho, wo = dy.shape
    claimed = np.zeros(dy.shape, dtype=bool)
    for _, rs in _window_slices(k, stride, ho):
        for _, cs in _window_slices(k, stride, wo):
            hit = (x[:, :, rs, cs] == y) & ~claimed
            dx[:, :, rs, cs] += dy * hit
            claimed |= hit
    return dx


def linear_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Accepts a single logit vector with an int label, or a batch of rows.
    """
    loss, _ = cross_entropy_with_grad(logits, labels)
    return loss


def cross_entropy_with_grad(logits, labels):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ConfigError("one label per logit row required")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ConfigError(f"labels must lie in [0, {z.shape[1]})")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad / z.shape[0]


def sgd_step(params: dict, grads: dict, cfg: TrainConfig, velocity: dict | None = None, lr: float | None = None) -> dict:
    """SGD with momentum then decoupled-style weight decay: v = mu v + g; p -= lr (v + wd p).

    ``velocity`` is updated in place when given. Returns the new parameter dict.
    """
    lr = cfg.learning_rate if lr is None else lr
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if velocity is not None:
            v = velocity.get(name)
            v = g if v is None else cfg.momentum * v + g
            velocity[name] = v
        else:
            v = g
        out[name] = (p - lr * (v + cfg.weight_decay * p)).astype(p.dtype, copy=False)
    return out


# Network passes ------------------------------------------------------------------


def train_forward(model: ModelGraph, params: dict, x: np.ndarray, ghost: int = 0):
    """Training-mode forward. Returns (logits, tape, batch_stats)."""
    tape = []
    skips = []
    batch_stats = {}
    for layer in model.layers:
        kind, hp, name = layer.kind, layer.hp, layer.name
        if kind == "conv":
            x, cache = conv_forward(x, params[f"{name}.weight"], params[f"{name}.bias"], hp["stride"], hp["pad"])
            tape.append((layer, cache))
        elif kind == "bn":
            x, cache, stats = bn_train_forward(x, params[f"{name}.gamma"], params[f"{name}.beta"], hp["eps"], ghost)
            batch_stats[name] = stats
            tape.append((layer, cache))
        elif kind == "relu":
            tape.append((layer, x))
            x = np.maximum(x, 0)
        elif kind == "avgpool":
            tape.append((layer, x.shape))
            view = np.lib.stride_tricks.sliding_window_view(x, (hp["window"],) * 2, axis=(2, 3))
            x = view[:, :, :: hp["stride"], :: hp["stride"]].mean(axis=(4, 5)).astype(x.dtype)
        elif kind == "maxpool":
            y = maxpool_forward(x, hp["window"], hp["stride"])
            tape.append((layer, (x, y)))
            x = y
        elif kind == "gap":
            tape.append((layer, x.shape))
            x = x.mean(axis=(2, 3), keepdims=True)
        elif kind == "flatten":
            tape.append((layer, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif kind == "linear":
            w = params[f"{name}.weight"]
            tape.append((layer, (x, w)))
            x = x @ w.T + params[f"{name}.bias"]
        elif kind == "res_begin":
            skips.append(x)
            tape.append((layer, None))
        elif kind == "res_end":
            skip = skips.pop()
            cache = None
            if layer.has_projection:
                skip, cache = conv_forward(skip, params[f"{name}.weight"], params[f"{name}.bias"], hp["stride"], 0)
            tape.append((layer, cache))
            x = x + skip
    return x, tape, batch_stats


def train_backward(tape, dlogits):
    """Backpropagate ``dlogits`` through ``tape``. Returns (dx, grads)."""
    grads = {}
    pending: list[np.ndarray] = []  # gradients waiting at res_begin
    d = dlogits
    for layer, cache in reversed(tape):
        kind, hp, name = layer.kind, layer.hp, layer.name
        if kind == "conv":
            d, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv_backward(d, cache)
        elif kind == "bn":
            d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = bn_train_backward(d, cache)
        elif kind == "relu":
            d = relu_backward(d, cache)
        elif kind == "avgpool":
            d = avgpool_backward(d, cache, hp["window"], hp["stride"])
        elif kind == "maxpool":
            x, y = cache
            d = maxpool_backward(d, x, y, hp["window"], hp["stride"])
        elif kind == "gap":
            n, c, h, w = cache
            d = np.broadcast_to(d / (h * w), cache).copy()
        elif kind == "flatten":
            d = d.reshape(cache)
        elif kind == "linear":
            d, grads[f"{name}.weight"], grads[f"{name}.bias"] = linear_backward(d, *cache)
        elif kind == "res_end":
            dskip = d
            if cache is not None:
                dskip, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv_backward(d, cache)
            pending.append(dskip)
        elif kind == "res_begin":
            d = d + pending.pop()
    return d, grads


def loss_and_grads(model: ModelGraph, params: dict, x: np.ndarray, labels: np.ndarray, ghost: int = 0):
    logits, tape, batch_stats = train_forward(model, params, x, ghost)
    loss, dlogits = cross_entropy_with_grad(logits, labels)
    _, grads = train_backward(tape, dlogits.astype(x.dtype))
    return loss, logits, grads, batch_stats


# Training loop ------------------------------------------------------------------------


def flip_jitter(batch: np.ndarray, rng: np.random.Generator, spread: float = 0.4) -> np.ndarray:
    """Training-time augmentation: per-image color jitter, then random h/v flips.

    Jitter factors are drawn from U(1 - spread, 1 + spread) in the order
    brightness, contrast, saturation; each flip fires with probability 1/2.
    """
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        x = apply_color_jitter(batch[i : i + 1], *rng.uniform(1 - spread, 1 + spread, 3))
        if rng.random() < 0.5:
            x = x[..., ::-1]
        if rng.random() < 0.5:
            x = x[..., ::-1, :]
        out[i] = x[0]
    return out


TRAIN_AUGMENTS: dict[str, Callable[[np.ndarray, np.random.Generator], np.ndarray] | None] = {
    "none": None,
    "flip-jitter": flip_jitter,
}


def train_source_model(
    arch: str,
    dataset,
    cfg: TrainConfig = TrainConfig(),
    class_count: int | None = None,
    model: ModelGraph | None = None,
    history: list | None = None,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> ModelGraph:
    """Train ``arch`` (or continue ``model``) on ``dataset`` and return the trained graph.

    Args:
        arch: reference architecture name, ignored when ``model`` is given.
        dataset: sequence of LabeledImage, or an (images, labels) pair of arrays.
        cfg: optimizer and schedule settings.
        class_count: defaults to max(label) + 1.
        model: optional starting graph.
        history: if given, receives one dict per epoch (loss, accuracy, lr).
        augment: optional ``(batch, rng) -> batch`` applied to every training batch,
            drawing from the training RNG so runs stay reproducible.
    """
    images, labels = _as_arrays(dataset)
    if images.shape[0] == 0:
        raise ConfigError("training set is empty")
    if class_count is None:
        class_count = model.class_count if model is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= class_count:
        raise ConfigError(f"labels must lie in [0, {class_count})")
    if model is None:
        model = build_reference_model(arch, class_count, cfg.seed, input_channels=images.shape[1])
    params = {k: np.array(v, dtype=np.float32) for k, v in model.params.items()}
    running = {k: (s.mean.astype(np.float64), s.variance.astype(np.float64)) for k, s in model.bn_stats.items()}
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    steps = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps
    step = 0
    m = cfg.bn_momentum
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(steps):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            lr = cfg.lr_at(step, total)
            batch = images[idx] if augment is None else augment(images[idx], rng)
            loss, logits, grads, batch_stats = loss_and_grads(model, params, batch, labels[idx], cfg.ghost_batch)
            params = sgd_step(params, grads, cfg, velocity, lr)
            for name, (bmean, bvar) in batch_stats.items():
                rmean, rvar = running[name]
                running[name] = ((1 - m) * rmean + m * bmean, (1 - m) * rvar + m * bvar)
            loss_sum += loss * idx.size
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            step += 1
        record = {"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n, "lr": lr}
        log.info("epoch %(epoch)d loss %(loss).4f acc %(accuracy).4f", record)
        if history is not None:
            history.append(record)
    stats = {k: ChannelStats(mu.astype(np.float32), var.astype(np.float32)) for k, (mu, var) in running.items()}
    return ModelGraph(model.arch, model.layers, params, stats, model.bn_mask, model.class_count, model.input_channels)


def _as_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        images, labels = dataset
    else:
        if len(dataset) == 0:
            raise ConfigError("training set is empty")
        images = np.concatenate([item.image for item in dataset], axis=0)
        labels = np.array([item.label for item in dataset])
    return np.ascontiguousarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def accuracy(model: ModelGraph, images: np.ndarray, labels: Sequence[int], batch_size: int = 256) -> float:
    """Source-mode accuracy, evaluated in batches (no cross-row coupling in source mode)."""
    from augbn.model import Source, forward

    hits = 0
    for s in range(0, len(labels), batch_size):
        logits = forward(model, images[s : s + batch_size], Source())
        hits += int((logits.argmax(axis=1) == np.asarray(labels[s : s + batch_size])).sum())
    return hits / len(labels)
