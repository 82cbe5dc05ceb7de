"""Learnable per-filter gates.

Each masked convolution owns one real value per output filter. The forward
pass squashes it through a sigmoid, hard-thresholds to {0,1}, and multiplies
the corresponding feature-map channel by the bit. The backward pass treats
the binarization as identity (straight-through estimator): the gradient of
the loss w.r.t. a bit is the spatial-and-batch sum of grad_out * pre-mask
feature map, and it reaches the real value through the sigmoid derivative.
Convolution gradients flow through the gated product, so a dead filter
receives exactly zero weight gradient until its gate reopens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import ConvParams, _conv_forward_raw, _conv_input_grad, _conv_param_grads
from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor, _sigmoid_raw

__all__ = [
    "FilterMask", "MaskedConvLayer", "binarize", "masked_forward",
    "ste_backward", "sparsity_loss", "mask_stats", "mask_stats_csv",
]


def binarize(real_mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Gate bits: 1 where sigmoid(value) >= threshold, else 0.

    The boundary counts as kept, so a zero real value (sigmoid exactly 0.5)
    keeps its filter at the default threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"binarize threshold must lie in (0,1), got {threshold}")
    v = np.asarray(real_mask)
    return (_sigmoid_raw(v.astype(np.float64)) >= threshold).astype(np.float32)


@dataclass
class FilterMask:
    """One trainable real value per output filter, plus its gradient slot."""

    values: np.ndarray
    threshold: float = 0.5
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ShapeError(f"mask values must be 1-D, got shape {self.values.shape}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"mask threshold must lie in (0,1), got {self.threshold}")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    def __len__(self) -> int:
        return self.values.size

    def binarized(self) -> np.ndarray:
        return binarize(self.values, self.threshold)

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.binarized() > 0.5)

    def zero_grad(self) -> None:
        # in place: the optimizer holds a reference to this array
        self.grad[...] = 0


class MaskedConvLayer:
    """Convolution whose output channels are gated by a FilterMask.

    The layer caches the pre-mask feature map from the latest forward, which
    the straight-through backward consumes; one forward/backward pair at a
    time per layer.
    """

    def __init__(self, conv: ConvParams, mask: FilterMask):
        if len(mask) != conv.out_channels:
            raise ShapeError(
                f"mask length {len(mask)} != conv out_channels {conv.out_channels}")
        self.conv = conv
        self.mask = mask
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def forward(self, x: Tensor) -> Tensor:
        return masked_forward(self, x)

    def ste_backward(self, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        gd = grad_out.data if isinstance(grad_out, Tensor) else np.asarray(grad_out)
        if self._cache is None:
            raise StateError("ste_backward called before masked forward")
        x, pre_mask, bits = self._cache
        if gd.shape != pre_mask.shape:
            raise ShapeError(f"grad_out shape {gd.shape} != cached feature map shape {pre_mask.shape}")
        return _ste_grads(self, x, pre_mask, bits, gd)

    def zero_grads(self) -> None:
        self.conv.zero_grads()
        self.mask.zero_grad()


def masked_forward(layer: MaskedConvLayer, x: Tensor) -> Tensor:
    """Convolve, then zero each output channel whose gate bit is 0."""
    conv = layer.conv
    if x.data.shape[1] != conv.in_channels:
        raise ShapeError(
            f"masked conv input has {x.data.shape[1]} channels (shape {x.data.shape}) "
            f"but weights expect {conv.in_channels}")
    conv.output_hw(x.data.shape[2], x.data.shape[3])
    pre_mask = _conv_forward_raw(x.data, conv.weights, conv.bias, conv.stride, conv.padding)
    bits = layer.mask.binarized()
    out = pre_mask * bits[None, :, None, None].astype(pre_mask.dtype)
    layer._cache = (x.data, pre_mask, bits)

    if not (x.requires_grad or conv.trainable):
        return Tensor._from_op(out, (), None)

    def bw(g: np.ndarray) -> None:
        gx, gw, gb, gm = _ste_grads(layer, x.data, pre_mask, bits, g,
                                    need_gx=x.requires_grad)
        if conv.trainable:
            conv.grad_weights += gw
            conv.grad_bias += gb
            layer.mask.grad += gm
        if x.requires_grad:
            x.accumulate_grad(gx)

    return Tensor._from_op(out, (x,), bw)


def _ste_grads(layer: MaskedConvLayer, x: np.ndarray, pre_mask: np.ndarray,
               bits: np.ndarray, grad_out: np.ndarray, need_gx: bool = True):
    conv = layer.conv
    # d L / d bit_j: grad_out dotted with the pre-mask map, summed over
    # batch and space (the bit is shared across all of them)
    gbit = np.einsum("nchw,nchw->c", grad_out.astype(np.float64),
                     pre_mask.astype(np.float64))
    sig = _sigmoid_raw(layer.mask.values.astype(np.float64))
    gmask = (gbit * sig * (1.0 - sig)).astype(layer.mask.values.dtype)
    # conv gradients see the gated upstream gradient
    gated = grad_out * bits[None, :, None, None].astype(grad_out.dtype)
    gw, gb = _conv_param_grads(x, conv.weights.shape, conv.stride, conv.padding,
                               gated, conv.weights.dtype)
    if need_gx:
        gx = _conv_input_grad(gated, conv.weights, conv.stride, conv.padding,
                              (x.shape[2], x.shape[3]), x.dtype)
    else:
        gx = None
    return gx, gw, gb, gmask


def ste_backward(layer: MaskedConvLayer, grad_out):
    """Straight-through backward for a masked conv layer.

    Returns (grad_input, grad_weights, grad_bias, grad_real_mask) computed
    from the cached forward state, without touching gradient slots.
    """
    return layer.ste_backward(grad_out)


def sparsity_loss(masks) -> tuple[float, float]:
    """Kept-filter ratio across all masks and its gradient per gate bit.

    Returns (value, per-bit gradient). The value is the integer count of
    1-bits divided once by the total filter count; the gradient of the
    ratio with respect to every bit is 1/total.
    """
    masks = list(masks)
    if not masks:
        raise ConfigError("sparsity_loss needs at least one registered mask")
    total = 0
    ones = 0
    for m in masks:
        total += len(m)
        ones += int(m.binarized().sum())
    return ones / total, 1.0 / total


def mask_stats(layers) -> list[tuple[str, int, int, int]]:
    """Per-layer (name, filter count, kept, removed) from binarized masks."""
    rows = []
    for name, mask in layers:
        n = len(mask)
        kept = int(mask.binarized().sum())
        rows.append((name, n, kept, n - kept))
    return rows


def mask_stats_csv(rows) -> str:
    lines = ["layer,n_i,kept,removed"]
    for name, n, kept, removed in rows:
        lines.append(f"{name},{n},{kept},{removed}")
    return "\n".join(lines) + "\n"
