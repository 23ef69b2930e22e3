"""Dense float32 layer kernels for the tiny-YOLO forward pass on CPU.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width), C-contiguous, dtype float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-6

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a layer expects."""

    def __init__(self, message: str, layer: Optional[int] = None,
                 expected=None, actual=None):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class ConvParams:
    """Parameters of one convolutional layer.

    ``weights`` has shape (out, in, k, k). ``activation`` is ``"linear"`` or
    ``"leaky"``. ``batchnorm`` is None once folded.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "linear"
    batchnorm: Optional[BatchNorm] = None

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"weights must be (out, in, k, k), got {self.weights.shape}")
        out = self.weights.shape[0]
        if self.bias.shape != (out,):
            raise ShapeError("bias length must equal out_channels",
                             expected=out, actual=self.bias.shape)
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.activation not in ("linear", "leaky"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        bn = self.batchnorm
        if bn is not None:
            for name in ("gamma", "beta", "mean", "variance"):
                if getattr(bn, name).shape != (out,):
                    raise ShapeError(f"batchnorm {name} length must equal out_channels",
                                     expected=out, actual=getattr(bn, name).shape)
            if np.any(bn.variance < 0):
                raise ValueError("batchnorm variance must be non-negative")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class PoolParams:
    size: int
    stride: int

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ValueError("pool size and stride must be >= 1")


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 rank-4 array."""
    t = np.ascontiguousarray(x, dtype=DTYPE)
    if t.ndim != 4 or 0 in t.shape:
        raise ShapeError(f"expected a non-empty rank-4 tensor, got shape {t.shape}")
    return t


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0 < slope < 1:
        raise ValueError("slope must lie in (0, 1)")
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x >= 0, x, x * DTYPE(slope)).astype(DTYPE, copy=False)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # columns laid out (n, c, ky, kx, oh, ow) to match weights (out, c, ky, kx)
    cols = np.empty((n, c, k, k, oh, ow), dtype=DTYPE)
    for ky in range(k):
        y_end = ky + stride * (oh - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (ow - 1) + 1
            cols[:, :, ky, kx] = x[:, :, ky:y_end:stride, kx:x_end:stride]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def conv2d(x: np.ndarray, params: ConvParams, layer: Optional[int] = None) -> np.ndarray:
    """Zero-padded 2-D convolution with optional batch-norm and activation.

    Batch-norm, when still attached, is applied as a per-channel scale and
    shift before the activation.
    """
    x = as_tensor(x)
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"expected {params.in_channels} input channels, got {x.shape[1]}",
            layer=layer, expected=params.in_channels, actual=x.shape[1])
    k = params.kernel_size
    if conv_output_size(x.shape[2], k, params.stride, params.padding) < 1 or \
            conv_output_size(x.shape[3], k, params.stride, params.padding) < 1:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} too small for kernel {k}",
                         layer=layer)
    cols, oh, ow = _im2col(x, k, params.stride, params.padding)
    wmat = params.weights.reshape(params.out_channels, -1).astype(DTYPE, copy=False)
    out = np.matmul(wmat, cols)  # (n, out, oh*ow)
    bn = params.batchnorm
    if bn is not None:
        scale, shift = _bn_scale_shift(bn, params.bias, BN_EPSILON)
        out = out * scale[:, None] + shift[:, None]
    else:
        out += params.bias.astype(DTYPE)[:, None]
    out = out.reshape(x.shape[0], params.out_channels, oh, ow)
    if params.activation == "leaky":
        out = leaky_relu(out)
    return np.ascontiguousarray(out, dtype=DTYPE)


def maxpool2d(x: np.ndarray, params: PoolParams) -> np.ndarray:
    """Max pooling with ceil-mode output and -inf fill past the right/bottom edge."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    size, stride = params.size, params.stride
    oh, ow = pool_output_size(h, stride), pool_output_size(w, stride)
    ph = max(0, (oh - 1) * stride + size - h)
    pw = max(0, (ow - 1) * stride + size - w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    out = np.full((n, c, oh, ow), -np.inf, dtype=DTYPE)
    for dy in range(size):
        for dx in range(size):
            window = x[:, :, dy:dy + stride * (oh - 1) + 1:stride,
                       dx:dx + stride * (ow - 1) + 1:stride]
            np.maximum(out, window, out=out)
    return out


def _bn_scale_shift(bn: BatchNorm, bias: np.ndarray, epsilon: float):
    bn_f = [np.asarray(a, dtype=np.float64) for a in (bn.gamma, bn.beta, bn.mean, bn.variance)]
    gamma, beta, mean, var = bn_f
    scale = gamma / np.sqrt(var + epsilon)
    shift = beta + scale * (np.asarray(bias, dtype=np.float64) - mean)
    return scale.astype(DTYPE), shift.astype(DTYPE)


def fold_batchnorm(params: ConvParams, epsilon: float = BN_EPSILON) -> ConvParams:
    """Return equivalent parameters with batch-norm merged into weights and bias."""
    if params.batchnorm is None:
        raise ValueError("layer has no batchnorm to fold")
    scale, shift = _bn_scale_shift(params.batchnorm, params.bias, epsilon)
    weights = (params.weights.astype(np.float64) * scale[:, None, None, None].astype(np.float64))
    return replace(params, weights=weights.astype(DTYPE), bias=shift, batchnorm=None)
