"""Dense 4-D (batch, channel, height, width) tensors with reverse-mode gradients.

Every value flowing through the toolkit is a `Tensor`. Operations build a
small backward graph; calling `Tensor.backward()` on a result accumulates
gradients into the `grad` slot of every tensor that was created with
`requires_grad=True` (and into layer parameters via the conv/masking ops).

Numerical conventions:
  * payload dtype is float32 by default (float64 inputs stay float64, which
    is what the finite-difference checker uses),
  * reductions (means, convolution inner products) accumulate in float64,
  * shapes must match exactly -- there is no implicit broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "exp",
    "add_scalar",
    "scalar_mul",
    "mean",
    "mean_channels",
    "sigmoid",
    "relu",
    "elu",
    "upsample_nearest",
    "downsample_avg",
    "concat_channels",
    "diff_x",
    "diff_y",
    "box_filter_3x3",
    "warp_horizontal",
]


class Tensor:
    """A 4-D numeric array plus an optional same-shaped gradient.

    Data is treated as immutable once constructed; `grad` accumulates during
    `backward()`. Tensors are safe to share across threads for reading.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n,c,h,w), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor payload contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], None] | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = backward_fn is not None
        t._parents = parents if backward_fn is not None else ()
        t._backward_fn = backward_fn
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, (), None)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        `grad` seeds the output gradient (defaults to ones, which for a
        single-element tensor is the usual loss seed).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")
        order = _topo_order(self)
        self.accumulate_grad(grad.astype(self.data.dtype, copy=False))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b.accumulate_grad(g.astype(b.data.dtype, copy=False))

    return Tensor._from_op(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = a.data - b.data
    if not _needs_grad(a, b):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b.accumulate_grad((-g).astype(b.data.dtype, copy=False))

    return Tensor._from_op(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad((g * b.data).astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b.accumulate_grad((g * a.data).astype(b.data.dtype, copy=False))

    return Tensor._from_op(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    if not _needs_grad(a, b):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad((g / b.data).astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b.accumulate_grad((-g * a.data / (b.data * b.data)).astype(b.data.dtype, copy=False))

    return Tensor._from_op(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    if not a.requires_grad:
        return Tensor._from_op(-a.data, (), None)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad((-g).astype(a.data.dtype, copy=False))

    return Tensor._from_op(-a.data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    sign = np.sign(a.data)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad((g * sign).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad((g * out).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + a.data.dtype.type(c)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(g.astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad((g * a.data.dtype.type(c)).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean(a: Tensor) -> Tensor:
    """Mean over all elements, returned as a (1,1,1,1) tensor."""
    val = np.mean(a.data, dtype=np.float64)
    out = np.array(val, dtype=a.data.dtype).reshape(1, 1, 1, 1)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    size = a.data.size

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(np.full_like(a.data, g.reshape(())[()] / size))

    return Tensor._from_op(out, (a,), bw)


def mean_channels(a: Tensor) -> Tensor:
    """Mean over the channel axis, keeping a singleton channel."""
    out = np.mean(a.data, axis=1, keepdims=True, dtype=np.float64).astype(a.data.dtype)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    c = a.data.shape[1]

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(np.broadcast_to(g / c, a.data.shape).astype(a.data.dtype))

    return Tensor._from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open-interval contract even where float rounding saturates
    tiny = np.finfo(x.dtype).tiny
    eps1 = np.float64(1.0) - np.finfo(x.dtype).epsneg
    return np.clip(out, tiny, x.dtype.type(eps1))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_raw(a.data)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad((g * out * (1.0 - out)).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    pos = a.data > 0

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(np.where(pos, g, 0).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


def elu(a: Tensor) -> Tensor:
    # max(x,0) + expm1(min(x,0)) avoids evaluating expm1 on large positives
    out = np.maximum(a.data, 0) + np.expm1(np.minimum(a.data, 0))
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    pos = a.data > 0

    def bw(g: np.ndarray) -> None:
        a.accumulate_grad(np.where(pos, g, g * (out + 1.0)).astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def upsample_nearest(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)
    n, c, h, w = a.data.shape

    def bw(g: np.ndarray) -> None:
        gsum = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64)
        a.accumulate_grad(gsum.astype(a.data.dtype))

    return Tensor._from_op(out, (a,), bw)


def downsample_avg(a: Tensor) -> Tensor:
    """2x average-pool downsampling; spatial dims must be even."""
    n, c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_avg needs even spatial dims, got {(h, w)}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float64)
    out = out.astype(a.data.dtype)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        gup = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        a.accumulate_grad(gup.astype(a.data.dtype, copy=False))

    return Tensor._from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one input")
    base = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat_channels: shapes {base} and {s} disagree outside the channel axis")
    out = np.concatenate([p.data for p in parts], axis=1)
    if not _needs_grad(*parts):
        return Tensor._from_op(out, (), None)
    splits = np.cumsum([p.data.shape[1] for p in parts])[:-1]

    def bw(g: np.ndarray) -> None:
        for p, gp in zip(parts, np.split(g, splits, axis=1)):
            if p.requires_grad:
                p.accumulate_grad(gp.astype(p.data.dtype, copy=False))

    return Tensor._from_op(out, tuple(parts), bw)


def diff_x(a: Tensor) -> Tensor:
    """Forward difference along width: out[..., i] = a[..., i+1] - a[..., i]."""
    out = a.data[:, :, :, 1:] - a.data[:, :, :, :-1]
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        ga = np.zeros_like(a.data)
        ga[:, :, :, 1:] += g
        ga[:, :, :, :-1] -= g
        a.accumulate_grad(ga)

    return Tensor._from_op(out, (a,), bw)


def diff_y(a: Tensor) -> Tensor:
    """Forward difference along height."""
    out = a.data[:, :, 1:, :] - a.data[:, :, :-1, :]
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        ga = np.zeros_like(a.data)
        ga[:, :, 1:, :] += g
        ga[:, :, :-1, :] -= g
        a.accumulate_grad(ga)

    return Tensor._from_op(out, (a,), bw)


def box_filter_3x3(a: Tensor) -> Tensor:
    """3x3 mean filter with 'valid' support: output is (h-2, w-2)."""
    n, c, h, w = a.data.shape
    if h < 3 or w < 3:
        raise ShapeError(f"box_filter_3x3 needs spatial dims >= 3, got {(h, w)}")
    oh, ow = h - 2, w - 2
    acc = np.zeros((n, c, oh, ow), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += a.data[:, :, dy:dy + oh, dx:dx + ow]
    out = (acc / 9.0).astype(a.data.dtype)
    if not a.requires_grad:
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        ga = np.zeros_like(a.data)
        gq = g / 9.0
        for dy in range(3):
            for dx in range(3):
                ga[:, :, dy:dy + oh, dx:dx + ow] += gq
        a.accumulate_grad(ga)

    return Tensor._from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# horizontal bilinear warp
# ---------------------------------------------------------------------------

def warp_horizontal(image: Tensor, disparity: Tensor, direction: str) -> Tensor:
    """Bilinear horizontal warp driven by a disparity field.

    `disparity` holds fractions of image width. With direction "left" the
    output reconstructs the left view by sampling `image` (the right view)
    at x - d*w; "right" samples at x + d*w. Out-of-range samples clamp to
    the border column. Differentiable in both arguments.
    """
    if direction == "left":
        sign = -1.0
    elif direction == "right":
        sign = 1.0
    else:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    n, c, h, w = image.data.shape
    dn, dc, dh, dw = disparity.data.shape
    if dc != 1 or (dn, dh, dw) != (n, h, w):
        raise ShapeError(
            f"warp_horizontal: disparity shape {disparity.data.shape} does not match image {image.data.shape}")

    xs = np.arange(w, dtype=np.float64) + sign * w * disparity.data.astype(np.float64)
    xs_c = np.clip(xs, 0.0, w - 1.0)
    with np.errstate(invalid="ignore"):  # non-finite disparities clamp to 0 and
        x0 = np.minimum(np.floor(xs_c), w - 2).astype(np.int64)  # poison frac instead
    x0 = np.maximum(x0, 0)
    frac = xs_c - x0  # in [0, 1]

    idx0 = np.broadcast_to(x0, (n, c, h, w))
    i0 = np.take_along_axis(image.data, idx0, axis=3)
    i1 = np.take_along_axis(image.data, idx0 + 1, axis=3)
    out_dtype = _result_dtype(image, disparity)
    out = (i0 * (1.0 - frac) + i1 * frac).astype(out_dtype)

    if not _needs_grad(image, disparity):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        if disparity.requires_grad:
            interior = (xs > 0.0) & (xs < w - 1.0)
            slope = (i1.astype(np.float64) - i0.astype(np.float64)) * g
            gd = slope.sum(axis=1, keepdims=True) * (sign * w) * interior
            disparity.accumulate_grad(gd.astype(disparity.data.dtype))
        if image.requires_grad:
            w1 = (g * frac).astype(np.float64)
            w0 = g.astype(np.float64) - w1
            base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
            base = (base * h + np.arange(h)[None, None, :, None]) * w
            flat0 = (base + idx0).ravel()
            gi = np.bincount(flat0, weights=w0.ravel(), minlength=n * c * h * w)
            gi += np.bincount(flat0 + 1, weights=w1.ravel(), minlength=n * c * h * w)
            image.accumulate_grad(gi.reshape(n, c, h, w).astype(image.data.dtype))

    return Tensor._from_op(out, (image, disparity), bw)
