"""Forward and backward kernels for the closed Tiny-YOLO layer set.

Feature maps are channels-first ``C x H x W`` numpy arrays, kernels are
``O x I x Kh x Kw``. Every kernel preserves the floating dtype of its
input (the network itself runs in float32; tests use float64 for
finite-difference checks). Functions that need a backward pass return
``(output, backward)`` where ``backward`` maps ``grad_out -> grad_in``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Backward = Callable[[np.ndarray], np.ndarray]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents do not line up for a kernel."""


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate and convert ``x`` into a rank <= 4 float array."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim > 4:
        raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class LayerParams:
    """Convolution weights, per-channel bias and optional batchnorm.

    With batchnorm present the bias is ignored; its role is played by
    ``batchnorm.shift`` (darknet stores them in the same slot).
    """

    weights: np.ndarray
    bias: np.ndarray
    batchnorm: Optional[BatchNorm] = None
    eps: float = 1e-5

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4:
            raise ShapeError(f"conv weights must be O x I x Kh x Kw, got shape {w.shape}")
        n_out = w.shape[0]
        if self.bias.shape != (n_out,):
            raise ShapeError(f"bias length {self.bias.shape} != output channels {n_out}")
        bn = self.batchnorm
        if bn is not None:
            for name in ("scale", "shift", "mean", "var"):
                v = getattr(bn, name)
                if v.shape != (n_out,):
                    raise ShapeError(f"batchnorm {name} length {v.shape} != output channels {n_out}")
            if np.any(bn.var < 0):
                raise ValueError("batchnorm running variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def affine(self, dtype=np.float64):
        """Per-channel ``(gain, offset)`` applied after the raw correlation."""
        bn = self.batchnorm
        if bn is None:
            gain = np.ones(self.out_channels)
            offset = self.bias.astype(np.float64)
        else:
            gain = bn.scale.astype(np.float64) / np.sqrt(bn.var.astype(np.float64) + self.eps)
            offset = bn.shift.astype(np.float64) - gain * bn.mean.astype(np.float64)
        return gain.astype(dtype), offset.astype(dtype)

    def folded(self) -> "LayerParams":
        """Batchnorm folded into weights and bias (optional post-load transform)."""
        if self.batchnorm is None:
            return self
        gain, offset = self.affine()
        w = (self.weights.astype(np.float64) * gain[:, None, None, None]).astype(self.weights.dtype)
        return LayerParams(w, offset.astype(self.bias.dtype), None, self.eps)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if span < 0 or span % stride:
        raise ShapeError(
            f"input extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _check_conv(shape, params: LayerParams, stride: int, pad: int):
    if len(shape) != 3:
        raise ShapeError(f"conv input must be C x H x W, got shape {tuple(shape)}")
    c, h, w = shape
    if params.in_channels != c:
        raise ShapeError(f"conv weights expect {params.in_channels} input channels, input has {c}")
    if pad < 0:
        raise ShapeError(f"pad must be non-negative, got {pad}")
    kh, kw = params.weights.shape[2:]
    return conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C, Ho, Wo, Kh, Kw) -> (C*Kh*Kw, Ho*Wo)
    return win.transpose(0, 3, 4, 1, 2).reshape(-1, ho * wo)


def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation followed by inference-mode batchnorm or bias."""
    ho, wo = _check_conv(x.shape, params, stride, pad)
    dtype = x.dtype
    o, _, kh, kw = params.weights.shape
    w = params.weights.reshape(o, -1).astype(dtype, copy=False)
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(x.shape[0], -1)
    else:
        cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    out = (w @ cols).reshape(o, ho, wo)
    gain, offset = params.affine(dtype)
    if params.batchnorm is not None:
        out *= gain[:, None, None]
    out += offset[:, None, None]
    return out


def conv2d_backward_input(
    grad_out: np.ndarray, params: LayerParams, stride: int, pad: int, input_shape: Sequence[int]
) -> np.ndarray:
    """Gradient of a scalar loss with respect to the conv input."""
    ho, wo = _check_conv(tuple(input_shape), params, stride, pad)
    o, c, kh, kw = params.weights.shape
    if grad_out.shape != (o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {(o, ho, wo)}")
    dtype = grad_out.dtype
    g = grad_out
    if params.batchnorm is not None:
        gain, _ = params.affine(dtype)
        g = g * gain[:, None, None]
    w = params.weights.reshape(o, -1).astype(dtype, copy=False)
    cols = w.T @ g.reshape(o, -1)
    _, h, wd = input_shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        return cols.reshape(c, h, wd)
    cols = cols.reshape(c, kh, kw, ho, wo)
    padded = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return padded[:, pad:pad + h, pad:pad + wd]


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0):
    out = conv2d_forward(x, params, stride, pad)
    shape = x.shape

    def backward(grad_out):
        return conv2d_backward_input(grad_out, params, stride, pad, shape)

    return out, backward


def _check_grad(grad_out: np.ndarray, shape):
    if grad_out.shape != tuple(shape):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {tuple(shape)}")


def leaky_relu(x: np.ndarray, slope: float = 0.1):
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = x >= 0
    out = np.where(mask, x, x * x.dtype.type(slope))
    # derivative at exactly 0 is 1

    def backward(grad_out):
        _check_grad(grad_out, out.shape)
        return np.where(mask, grad_out, grad_out * grad_out.dtype.type(slope))

    return out, backward


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1 - s)


def logistic(x: np.ndarray):
    out = sigmoid(x).astype(x.dtype, copy=False)

    def backward(grad_out):
        _check_grad(grad_out, out.shape)
        return grad_out * out * (1 - out)

    return out, backward


def pointwise(kind: str, x: np.ndarray, slope: float = 0.1):
    """Dispatch for the pointwise activations: ``leaky``, ``logistic``, ``linear``."""
    if kind in ("leaky", "leaky_relu"):
        return leaky_relu(x, slope)
    if kind in ("logistic", "sigmoid"):
        return logistic(x)
    if kind == "linear":
        def backward(grad_out):
            _check_grad(grad_out, x.shape)
            return grad_out
        return x, backward
    raise ValueError(f"unsupported activation {kind!r}")


def maxpool_output_size(size: int, pool: int, stride: int) -> int:
    # darknet: implicit padding of (pool - 1) cells in total
    return (size + pool - 1 - pool) // stride + 1


def maxpool(x: np.ndarray, size: int = 2, stride: int = 2):
    """Darknet-style max pooling.

    The implicit padding of ``size - 1`` cells is split with
    ``(size - 1) // 2`` on the top/left and the rest on the bottom/right;
    padded positions never win. A 2x2 pool with stride 1 therefore keeps
    the spatial size. Ties resolve to the first position in row-major
    window order.
    """
    if size < 1 or stride < 1:
        raise ValueError(f"maxpool size and stride must be >= 1, got {size}, {stride}")
    if x.ndim != 3:
        raise ShapeError(f"maxpool input must be C x H x W, got shape {x.shape}")
    c, h, w = x.shape
    ho, wo = maxpool_output_size(h, size, stride), maxpool_output_size(w, size, stride)
    off = (size - 1) // 2
    ph = max((ho - 1) * stride + size - h - off, 0)
    pw = max((wo - 1) * stride + size - w - off, 0)
    padded = np.pad(x, ((0, 0), (off, ph), (off, pw)), constant_values=-np.inf)
    win = sliding_window_view(padded, (size, size), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    out = win.max(axis=(-2, -1))

    def backward(grad_out):
        _check_grad(grad_out, out.shape)
        # argmax is only needed on the way back; np.argmax keeps the first of ties
        arg = win.reshape(c, ho, wo, size * size).argmax(axis=-1)
        rows = np.arange(ho)[:, None] * stride + arg // size - off
        cols = np.arange(wo)[None, :] * stride + arg % size - off
        flat = (np.arange(c)[:, None, None] * h + rows) * w + cols
        grad = np.zeros(c * h * w, dtype=grad_out.dtype)
        np.add.at(grad, flat.ravel(), grad_out.ravel())
        return grad.reshape(c, h, w)

    return np.ascontiguousarray(out), backward


def upsample2x(x: np.ndarray):
    if x.ndim != 3:
        raise ShapeError(f"upsample input must be C x H x W, got shape {x.shape}")
    c, h, w = x.shape
    out = x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(grad_out):
        _check_grad(grad_out, out.shape)
        return grad_out.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    return out, backward


def concat_channels(inputs: Sequence[np.ndarray]):
    """Channel concatenation; backward returns one gradient per input."""
    if not inputs:
        raise ShapeError("concat needs at least one input")
    spatial = {t.shape[1:] for t in inputs}
    if len(spatial) != 1:
        raise ShapeError(f"concat inputs disagree on H x W: {sorted(spatial)}")
    out = inputs[0] if len(inputs) == 1 else np.concatenate(inputs, axis=0)
    offsets = np.cumsum([t.shape[0] for t in inputs])[:-1]

    def backward(grad_out):
        _check_grad(grad_out, out.shape)
        return np.split(grad_out, offsets, axis=0)

    return out, backward
