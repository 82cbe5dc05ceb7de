"""Unsupervised stereo task loss.

Appearance matching (SSIM blended with L1 on the warp-reconstructed view),
edge-aware disparity smoothness, and left-right disparity consistency, each
evaluated for both views at every prediction scale. Disparities are
fractions of image width; the bilinear warper turns them into pixel
offsets internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, absolute, add, add_scalar, box_filter_3x3, diff_x, diff_y,
                     div, downsample_avg, exp, mean, mean_channels, mul, neg,
                     scalar_mul, sub, warp_horizontal)

__all__ = [
    "StereoPair", "DisparityMaps", "LossWeights", "LossReport",
    "ssim", "appearance_loss", "smoothness_loss", "lr_consistency_loss",
    "task_loss", "loss_history_csv",
]

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_SSIM_WEIGHT = 0.85


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class StereoPair:
    """A rectified stereo batch; both views share shape (n,3,h,w) in [0,1]."""

    left: Tensor
    right: Tensor

    def __post_init__(self):
        self.left = _as_tensor(self.left)
        self.right = _as_tensor(self.right)
        if self.left.shape != self.right.shape:
            raise ShapeError(f"stereo pair shapes differ: {self.left.shape} vs {self.right.shape}")
        for name, t in (("left", self.left), ("right", self.right)):
            lo, hi = float(t.data.min()), float(t.data.max())
            if lo < -1e-6 or hi > 1.0 + 1e-6:
                raise ValueError(f"{name} image values outside [0,1]: min {lo}, max {hi}")

    @property
    def shape(self):
        return self.left.shape


@dataclass
class DisparityMaps:
    """Predicted left and right disparities at one scale, (n,1,h,w) each."""

    d_l: Tensor
    d_r: Tensor

    def __post_init__(self):
        if self.d_l.shape != self.d_r.shape:
            raise ShapeError(f"disparity shapes differ: {self.d_l.shape} vs {self.d_r.shape}")
        if self.d_l.shape[1] != 1:
            raise ShapeError(f"disparities must be single-channel, got shape {self.d_l.shape}")


@dataclass
class LossWeights:
    alpha_ap: float = 1.0
    alpha_ds: float = 0.1
    alpha_lr: float = 1.0

    def __post_init__(self):
        if self.alpha_ap <= 0:
            raise ValueError(f"alpha_ap must be positive, got {self.alpha_ap}")
        if self.alpha_ds < 0 or self.alpha_lr < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Per-component loss breakdown for one step (components unweighted)."""

    step: int = 0
    l_ap: float = 0.0
    l_ds: float = 0.0
    l_lr: float = 0.0
    l_mask: float = 0.0
    l_total: float = 0.0
    l_weight_l1: float = field(default=0.0, repr=False)

    CSV_HEADER = "step,L_ap,L_ds,L_lr,L_mask,L_total"

    def csv_row(self) -> str:
        return f"{self.step},{self.l_ap!r},{self.l_ds!r},{self.l_lr!r},{self.l_mask!r},{self.l_total!r}"


def loss_history_csv(reports) -> str:
    lines = [LossReport.CSV_HEADER]
    lines.extend(r.csv_row() for r in reports)
    return "\n".join(lines) + "\n"


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM map over 3x3 mean-pool windows ('valid' support).

    Values lie in [-1, 1]; identical inputs map to exactly 1 everywhere.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} do not match")
    mu_a = box_filter_3x3(a)
    mu_b = box_filter_3x3(b)
    mu_ab = mul(mu_a, mu_b)
    mu_aa = mul(mu_a, mu_a)
    mu_bb = mul(mu_b, mu_b)
    var_a = sub(box_filter_3x3(mul(a, a)), mu_aa)
    var_b = sub(box_filter_3x3(mul(b, b)), mu_bb)
    cov = sub(box_filter_3x3(mul(a, b)), mu_ab)
    num = mul(add_scalar(scalar_mul(mu_ab, 2.0), SSIM_C1),
              add_scalar(scalar_mul(cov, 2.0), SSIM_C2))
    den = mul(add_scalar(add(mu_aa, mu_bb), SSIM_C1),
              add_scalar(add(var_a, var_b), SSIM_C2))
    return div(num, den)


def appearance_loss(original: Tensor, reconstructed: Tensor,
                    ssim_weight: float = DEFAULT_SSIM_WEIGHT) -> Tensor:
    """Blend of mean (1-SSIM)/2 and mean absolute difference.

    The SSIM term is averaged over its valid (h-2, w-2) support, the L1 term
    over the full image; zero iff the images are identical.
    """
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"appearance_loss: shapes {original.shape} and {reconstructed.shape} do not match")
    l1 = mean(absolute(sub(original, reconstructed)))
    if ssim_weight == 0.0:
        return l1
    dssim = mean(scalar_mul(add_scalar(neg(ssim(original, reconstructed)), 1.0), 0.5))
    return add(scalar_mul(dssim, ssim_weight), scalar_mul(l1, 1.0 - ssim_weight))


def smoothness_loss(disparity: Tensor, image: Tensor) -> Tensor:
    """Edge-aware smoothness: |d disparity| weighted by exp(-|d image|).

    Image gradients are channel means of per-channel absolute differences;
    the x and y terms are averaged over their own supports and summed.
    """
    n, c, h, w = disparity.shape
    if c != 1:
        raise ShapeError(f"disparity must be single-channel, got shape {disparity.shape}")
    if image.shape[0] != n or image.shape[2] != h or image.shape[3] != w:
        raise ShapeError(
            f"smoothness_loss: image shape {image.shape} does not match disparity {disparity.shape}")
    wx = exp(neg(mean_channels(absolute(diff_x(image)))))
    wy = exp(neg(mean_channels(absolute(diff_y(image)))))
    tx = mean(mul(absolute(diff_x(disparity)), wx))
    ty = mean(mul(absolute(diff_y(disparity)), wy))
    return add(tx, ty)


def lr_consistency_loss(d_l: Tensor, d_r: Tensor) -> Tensor:
    """Mean mutual projection error between the two disparity maps."""
    if d_l.shape != d_r.shape:
        raise ShapeError(f"lr_consistency_loss: shapes {d_l.shape} and {d_r.shape} do not match")
    r_in_l = warp_horizontal(d_r, d_l, "left")
    l_in_r = warp_horizontal(d_l, d_r, "right")
    return add(mean(absolute(sub(d_l, r_in_l))),
               mean(absolute(sub(d_r, l_in_r))))


def _image_pyramid(t: Tensor, scales: int) -> list[Tensor]:
    pyr = [t]
    for _ in range(scales - 1):
        pyr.append(downsample_avg(pyr[-1]))
    return pyr


def task_loss(pair: StereoPair, disparities: list[DisparityMaps], weights: LossWeights,
              ssim_weight: float = DEFAULT_SSIM_WEIGHT) -> tuple[Tensor, LossReport]:
    """Weighted stereo task loss over all scales and both directions.

    Per scale s the smoothness weight is divided by 2^s; every component is
    averaged over scales. Returns the scalar loss tensor and a report with
    the unweighted aggregated components (mask slot left at zero).
    """
    scales = len(disparities)
    if scales == 0:
        raise ShapeError("task_loss needs at least one disparity scale")
    n, _, h, w = pair.shape
    lefts = _image_pyramid(pair.left, scales)
    rights = _image_pyramid(pair.right, scales)
    for s, d in enumerate(disparities):
        expect = (n, 1, h >> s, w >> s)
        if d.d_l.shape != expect:
            raise ShapeError(
                f"scale {s}: disparity shape {d.d_l.shape} != expected {expect} "
                f"({scales} scales for input {pair.shape})")

    ap_terms: list[Tensor] = []
    ds_terms: list[Tensor] = []
    lr_terms: list[Tensor] = []
    for s, d in enumerate(disparities):
        il, ir = lefts[s], rights[s]
        recon_l = warp_horizontal(ir, d.d_l, "left")
        recon_r = warp_horizontal(il, d.d_r, "right")
        ap_terms.append(add(appearance_loss(il, recon_l, ssim_weight),
                            appearance_loss(ir, recon_r, ssim_weight)))
        ds_terms.append(scalar_mul(add(smoothness_loss(d.d_l, il),
                                       smoothness_loss(d.d_r, ir)), 1.0 / (1 << s)))
        lr_terms.append(lr_consistency_loss(d.d_l, d.d_r))

    def _avg(terms: list[Tensor]) -> Tensor:
        acc = terms[0]
        for t in terms[1:]:
            acc = add(acc, t)
        return scalar_mul(acc, 1.0 / scales)

    ap = _avg(ap_terms)
    ds = _avg(ds_terms)
    lr = _avg(lr_terms)
    total = add(add(scalar_mul(ap, weights.alpha_ap), scalar_mul(ds, weights.alpha_ds)),
                scalar_mul(lr, weights.alpha_lr))
    report = LossReport(l_ap=ap.item(), l_ds=ds.item(), l_lr=lr.item(),
                        l_total=total.item())
    return total, report
