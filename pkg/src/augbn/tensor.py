"""Dense NCHW float32 tensors and the forward kernels built on them.

A tensor is a plain C-contiguous ``numpy.ndarray`` of dtype float32 with rank
1 to 4. Axes are ordered (instances N, channels C, height H, width W).
Reductions accumulate in float64 and are stored back as float32.

Kernels prefixed with an underscore keep the input dtype; the trainer runs them
in float64 for finite-difference checks. Public kernels always return float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from augbn.errors import ShapeError

DTYPE = np.float32


def as_tensor(x, rank: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 tensor and validate its extents."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be in 1..4, got {arr.ndim}")
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and (population) variance."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean)
        var = np.asarray(self.variance)
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ShapeError(f"mean/variance shapes differ: {mean.shape} vs {var.shape}")
        if np.any(var < 0):
            raise ValueError("variance must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} exceeds padded extent {size + 2 * padding}")
    return span // stride + 1


def _use_shift(stride: int, h: int, w: int) -> bool:
    # Shifted GEMM wastes work on the padding ring, which only pays off on larger maps.
    return stride == 1 and min(h, w) >= 16


# Rows are processed in chunks whose padded input stays near this many bytes;
# one large GEMM over a big batch thrashes cache and runs several times slower.
_CHUNK_BYTES = 160 * 1024


def conv_chunk_rows(x_shape, padding: int, itemsize: int) -> int:
    _, c, h, w = x_shape
    per_row = c * (h + 2 * padding) * (w + 2 * padding) * itemsize
    return max(1, _CHUNK_BYTES // per_row)


def _conv2d(x, weight, bias, stride: int, padding: int, keep_input: bool = False):
    """Dtype-preserving convolution; see ``_conv2d_block`` for ``keep_input``."""
    rows = conv_chunk_rows(x.shape, padding, x.itemsize)
    if keep_input or x.shape[0] <= rows:
        return _conv2d_block(x, weight, bias, stride, padding, keep_input)
    return np.concatenate(
        [_conv2d_block(x[s : s + rows], weight, bias, stride, padding) for s in range(0, x.shape[0], rows)]
    )


def _conv2d_block(x, weight, bias, stride: int, padding: int, keep_input: bool = False):
    """Convolution of one block of rows.

    Returns the output, or ``(output, padded)`` when ``keep_input`` is set, where
    ``padded`` is the zero-padded input in (C, N, H + 2p, W + 2p) layout.
    """
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    dtype = np.result_type(x, weight)
    # Per-tap (Cout, Cin) matrices must be contiguous for matmul to reach BLAS.
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1), dtype=dtype)
    size = n * hp * wp
    if _use_shift(stride, h, w):
        # Shifted GEMM: each tap reads a contiguous window of the flattened padded
        # input; the output is computed on the padded grid and cropped.
        tail = (kh - 1) * wp + kw
        buf = np.zeros((cin, size + tail), dtype=dtype)
        padded = buf[:, :size].reshape(cin, n, hp, wp)
        padded[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
        acc = np.zeros((cout, size), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                acc += taps[i, j] @ buf[:, off : off + size]
        out = acc.reshape(cout, n, hp, wp)[:, :, :ho, :wo]
    else:
        padded = np.zeros((cin, n, hp, wp), dtype=dtype)
        padded[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
        acc = np.zeros((cout, n * ho * wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                patch = padded[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                acc += taps[i, j] @ patch.reshape(cin, -1)
        out = acc.reshape(cout, n, ho, wo)
    if bias is not None:
        out = out + bias.reshape(-1, 1, 1, 1).astype(dtype)
    y = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return (y, padded) if keep_input else y


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding.

    Args:
        x: input of shape (N, Cin, H, W).
        weight: kernel of shape (Cout, Cin, Kh, Kw).
        bias: optional vector of length Cout.
        stride: step between output taps.
        padding: zeros added on each spatial border.

    Returns:
        Tensor of shape (N, Cout, H', W') with H' = (H + 2p - Kh) // stride + 1.
    """
    x = as_tensor(x, 4)
    weight = as_tensor(weight, 4)
    if bias is not None:
        bias = as_tensor(bias, 1)
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(f"bias length {bias.shape[0]} != Cout {weight.shape[0]}")
    return _conv2d(x, weight, bias, stride, padding).astype(DTYPE, copy=False)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), DTYPE(0))


def _pool_windows(x, window: int, stride: int):
    n, c, h, w = x.shape
    if window < 1 or window > h or window > w:
        raise ShapeError(f"pool window {window} does not fit {h}x{w}")
    if stride < 1:
        raise ShapeError("pool stride must be positive")
    view = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _avg_pool2d(x, window: int, stride: int):
    return _pool_windows(x, window, stride).mean(axis=(4, 5))


def avg_pool2d(x, window: int, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x, 4)
    return _avg_pool2d(x, window, stride or window).astype(DTYPE)


def max_pool2d(x, window: int, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x, 4)
    return np.ascontiguousarray(_pool_windows(x, window, stride or window).max(axis=(4, 5)))


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x, 4)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)


def _linear(x, weight, bias):
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear(x, weight, bias=None) -> np.ndarray:
    x = as_tensor(x, 2)
    weight = as_tensor(weight, 2)
    if bias is not None:
        bias = as_tensor(bias, 1)
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(f"bias length {bias.shape[0]} != K {weight.shape[0]}")
    return _linear(x, weight, bias).astype(DTYPE, copy=False)


def softmax(logits) -> np.ndarray:
    """Numerically safe softmax over the last axis (vector or batch of rows)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] < 1:
        raise ShapeError(f"softmax expects a vector or matrix, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def channel_moments(x) -> ChannelStats:
    """Per-channel mean and biased variance over the N, H and W axes."""
    x = as_tensor(x, 4)
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    return ChannelStats(mean.astype(DTYPE), var.astype(DTYPE))
