"""2-D convolution: forward, exact analytic backward, and parameter container.

The inner product accumulates in float64 (one GEMM per batch item over an
im2col buffer). The input gradient is computed by convolving the
stride-dilated output gradient with the flipped, transposed kernel, which
reuses the same forward machinery.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

__all__ = ["ConvParams", "conv2d_forward", "conv2d_backward"]

# scratch buffers for im2col and padding, reused across calls; thread-local
# so concurrent layer execution cannot alias
_scratch = threading.local()


def _buffer(tag: str, shape: tuple, dtype) -> np.ndarray:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _padded(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    xp = _buffer("pad", (n, c, h + 2 * padding, w + 2 * padding), x.dtype)
    xp[...] = 0.0
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


@dataclass
class ConvParams:
    """Convolution weights plus geometry. Gradients live alongside the data."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    weights: np.ndarray = None
    bias: np.ndarray = None
    trainable: bool = True
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError(
                f"invalid conv geometry: kernel={self.kernel_size} stride={self.stride} padding={self.padding}")
        if self.padding > self.kernel_size - 1:
            raise ShapeError(f"padding {self.padding} must be <= kernel_size-1 ({self.kernel_size - 1})")
        wshape = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.weights is None:
            self.weights = np.zeros(wshape, dtype=np.float32)
        else:
            self.weights = np.ascontiguousarray(self.weights)
            if self.weights.shape != wshape:
                raise ShapeError(f"weights shape {self.weights.shape} != expected {wshape}")
        if self.bias is None:
            self.bias = np.zeros(self.out_channels, dtype=self.weights.dtype)
        else:
            self.bias = np.ascontiguousarray(self.bias)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")
        self.zero_grads()

    def zero_grads(self) -> None:
        # in place: the optimizer holds references to these arrays
        if self.grad_weights is None or self.grad_weights.shape != self.weights.shape:
            self.grad_weights = np.zeros_like(self.weights)
            self.grad_bias = np.zeros_like(self.bias)
        else:
            self.grad_weights[...] = 0
            self.grad_bias[...] = 0

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(
                f"conv output would be empty: input {(h, w)}, kernel {k}, stride {s}, padding {p}")
        return oh, ow

    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size


def _check_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels (shape {x.shape}) but weights expect "
            f"{params.in_channels} (shape {params.weights.shape})")


def _conv_forward_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                      stride: int, padding: int) -> np.ndarray:
    n, ci, h, win = x.shape
    co, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (win + 2 * padding - k) // stride + 1
    xp = _padded(x, padding)
    w64 = w.reshape(co, -1).astype(np.float64)
    b64 = b.astype(np.float64)[:, None] if b is not None else None
    out = np.empty((n, co, oh, ow), dtype=np.result_type(x.dtype, w.dtype))
    patch = _buffer("im2col", (ci * k * k, oh * ow), np.float64)
    pview = patch.reshape(ci, k, k, oh, ow)
    for bi in range(n):
        xb = xp[bi]
        for i in range(k):
            for j in range(k):
                pview[:, i, j] = xb[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
        y = w64 @ patch
        if b64 is not None:
            y += b64
        out[bi] = y.reshape(co, oh, ow)
    return out


def _conv_param_grads(x: np.ndarray, w_shape: tuple, stride: int, padding: int,
                      gy: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    n, ci, h, win = x.shape
    co, _, k, _ = w_shape
    oh, ow = gy.shape[2], gy.shape[3]
    xp = _padded(x, padding)
    gw = np.zeros((co, ci * k * k), dtype=np.float64)
    patch = _buffer("im2col", (ci * k * k, oh * ow), np.float64)
    pview = patch.reshape(ci, k, k, oh, ow)
    for bi in range(n):
        xb = xp[bi]
        for i in range(k):
            for j in range(k):
                pview[:, i, j] = xb[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
        gw += gy[bi].reshape(co, -1).astype(np.float64) @ patch.T
    gb = gy.sum(axis=(0, 2, 3), dtype=np.float64)
    return gw.reshape(w_shape).astype(dtype), gb.astype(dtype)


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int], dtype) -> np.ndarray:
    n, co, oh, ow = gy.shape
    _, ci, k, _ = w.shape
    h, win = in_hw
    if stride > 1:
        gyd = np.zeros((n, co, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=gy.dtype)
        gyd[:, :, ::stride, ::stride] = gy
    else:
        gyd = gy
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    core = _conv_forward_raw(gyd, wt, None, 1, k - 1 - padding)
    # stride remainders leave untouched rows/cols at the bottom/right edge
    rh = h - core.shape[2]
    rw = win - core.shape[3]
    if rh or rw:
        core = np.pad(core, ((0, 0), (0, 0), (0, rh), (0, rw)))
    return core.astype(dtype, copy=False)


def conv2d_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Convolve `x` with `params`, wiring the backward graph.

    Gradients accumulate into `params.grad_weights` / `params.grad_bias`
    (when `params.trainable`) and into `x.grad` (when `x.requires_grad`).
    """
    _check_input(x.data, params)
    params.output_hw(x.data.shape[2], x.data.shape[3])
    out = _conv_forward_raw(x.data, params.weights, params.bias, params.stride, params.padding)
    if not (x.requires_grad or params.trainable):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if params.trainable:
            gw, gb = _conv_param_grads(x.data, params.weights.shape, params.stride,
                                       params.padding, g, params.weights.dtype)
            params.grad_weights += gw
            params.grad_bias += gb
        if x.requires_grad:
            gx = _conv_input_grad(g, params.weights, params.stride, params.padding,
                                  (x.data.shape[2], x.data.shape[3]), x.data.dtype)
            x.accumulate_grad(gx)

    return Tensor._from_op(out, (x,), bw)


def conv2d_backward(x, params: ConvParams, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact analytic gradients of the convolution, as plain arrays.

    Returns (grad_input, grad_weights, grad_bias) without touching any
    gradient slots; `x` and `grad_out` may be Tensors or numpy arrays.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    gd = grad_out.data if isinstance(grad_out, Tensor) else np.asarray(grad_out)
    _check_input(xd, params)
    oh, ow = params.output_hw(xd.shape[2], xd.shape[3])
    expect = (xd.shape[0], params.out_channels, oh, ow)
    if gd.shape != expect:
        raise ShapeError(f"grad_out shape {gd.shape} != forward output shape {expect}")
    gw, gb = _conv_param_grads(xd, params.weights.shape, params.stride, params.padding,
                               gd, params.weights.dtype)
    gx = _conv_input_grad(gd, params.weights, params.stride, params.padding,
                          (xd.shape[2], xd.shape[3]), xd.dtype)
    return gx, gw, gb
