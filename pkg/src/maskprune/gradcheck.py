"""Central-difference gradient checking.

`grad_check` is the public oracle: it compares an operation's analytic
backward against finite differences computed from nothing but repeated
forward evaluation. `run_suite` bundles the canonical checks used by the
CLI's gradcheck command. Callers must not route the checked function
through the mask binarization (it is intentionally non-differentiable).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["GradCheckResult", "fd_check", "grad_check", "run_suite"]

DEFAULT_STEP = 1e-4
DEFAULT_REL_TOL = 1e-3
DEFAULT_ABS_TOL = 1e-5


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_target: int = -1
    worst_index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0

    def describe(self) -> str:
        if self.passed:
            return f"pass (max rel err {self.max_rel_error:.3e})"
        return (f"FAIL at target {self.worst_target} index {self.worst_index}: "
                f"analytic {self.analytic:.6e} vs numeric {self.numeric:.6e} "
                f"(rel err {self.max_rel_error:.3e})")


def fd_check(forward: Callable[[], float],
             targets: Sequence[tuple[np.ndarray, np.ndarray]],
             step: float = DEFAULT_STEP,
             rel_tol: float = DEFAULT_REL_TOL,
             abs_tol: float = DEFAULT_ABS_TOL) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    `targets` pairs each float64 array (perturbed in place) with its
    analytic gradient. `forward` must be a pure function of the target
    arrays' current contents.
    """
    worst = GradCheckResult(passed=True, max_rel_error=0.0)
    for ti, (arr, analytic) in enumerate(targets):
        if arr.shape != analytic.shape:
            raise ValueError(f"target {ti}: array shape {arr.shape} != gradient shape {analytic.shape}")
        flat = arr.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = forward()
            flat[i] = orig - step
            fm = forward()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(ana[i])
            diff = abs(a - num)
            scale = max(abs(a), abs(num))
            rel = diff / max(scale, abs_tol)
            if rel > worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_target = ti
                worst.worst_index = tuple(int(v) for v in np.unravel_index(i, arr.shape))
                worst.analytic = a
                worst.numeric = num
            if diff > abs_tol + rel_tol * scale:
                worst.passed = False
    return worst


def grad_check(f: Callable[..., Tensor], inputs: Sequence,
               rel_tol: float = DEFAULT_REL_TOL,
               step: float = DEFAULT_STEP) -> GradCheckResult:
    """Check an op's analytic input gradients by finite differences.

    `f` takes Tensors and returns a Tensor; inputs are upcast to float64
    copies. The output is scalarized with a fixed random projection so
    asymmetric gradient bugs cannot cancel out.
    """
    ins = []
    for t in inputs:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        ins.append(Tensor(np.array(arr, dtype=np.float64), requires_grad=True, dtype=np.float64))
    out = f(*ins)
    proj = np.random.Generator(np.random.Philox(key=0xC0FFEE)).standard_normal(out.data.shape)
    out.backward(proj)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in ins]

    def forward() -> float:
        return float(np.sum(f(*ins).data * proj))

    return fd_check(forward, list(zip((t.data for t in ins), analytic)),
                    step=step, rel_tol=rel_tol)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def fd_safe_disparity(rng: np.random.Generator, shape: tuple, width: int,
                      pixel_base: int = 1) -> np.ndarray:
    """Disparities whose finite-difference neighbourhood avoids kinks.

    Pixel offsets are `pixel_base` + [0.35, 0.45], quantized to 1/100 pixel:
    bilinear sample positions stay far from integers, pixelwise differences
    are either exactly zero or well above the probe step, and maps built
    with different `pixel_base` stay separated (for L1 consistency terms).
    """
    q = rng.integers(0, 11, shape).astype(np.float64)
    return (pixel_base + 0.35 + 0.01 * q) / width


def fd_safe_images(shape: tuple, separation: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """A smooth ramp pair whose pointwise difference is bounded away from zero."""
    n, c, h, w = shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    img = np.empty(shape, np.float64)
    for ci in range(c):
        img[:, ci] = 0.15 + 0.05 * ci + 0.006 * (ci + 1) * xs + 0.004 * ys
    return img, img + separation


def run_suite(seeds: Sequence[int] = range(10),
              rel_tol: float = DEFAULT_REL_TOL,
              step: float = DEFAULT_STEP) -> list[tuple[str, GradCheckResult]]:
    """Finite-difference checks for every differentiable op the trainer uses.

    Losses with absolute-value terms and the bilinear warp are checked at
    constructed sample points that keep the probe away from their kinks
    (the ops are piecewise smooth; the checks sample the smooth regions).
    """
    from . import losses, tensor
    from .conv import ConvParams, conv2d_forward

    results: list[tuple[str, GradCheckResult]] = []

    def record(name: str, res: GradCheckResult) -> None:
        results.append((name, res))

    for seed in seeds:
        rng = _rng(seed * 7919 + 13)
        img_a, img_b = fd_safe_images((1, 3, 6, 8))
        disp = fd_safe_disparity(rng, (1, 1, 6, 8), width=8, pixel_base=1)
        disp_b = fd_safe_disparity(rng, (1, 1, 6, 8), width=8, pixel_base=2)
        rand_img = rng.uniform(0.05, 0.95, (1, 3, 6, 8))

        # convolution: input gradient via grad_check, parameter gradients via fd_check
        x = rng.standard_normal((1, 2, 5, 5))
        for tag, stride, pad in (("s1", 1, 1), ("s2", 2, 0)):
            w = (rng.standard_normal((3, 2, 3, 3)) * 0.5)
            b = rng.standard_normal(3) * 0.1
            params = ConvParams(2, 3, 3, stride=stride, padding=pad,
                                weights=w.astype(np.float64), bias=b.astype(np.float64))
            record(f"conv2d[{tag}]/input seed={seed}",
                   grad_check(lambda t: conv2d_forward(t, params), [x], rel_tol, step))
            xt = Tensor(x, dtype=np.float64)
            proj = _rng(seed + 101).standard_normal(conv2d_forward(xt, params).data.shape)
            params.zero_grads()
            conv2d_forward(xt, params).backward(proj)

            def conv_forward() -> float:
                return float(np.sum(conv2d_forward(xt, params).data * proj))

            record(f"conv2d[{tag}]/params seed={seed}",
                   fd_check(conv_forward,
                            [(params.weights, params.grad_weights.copy()),
                             (params.bias, params.grad_bias.copy())],
                            step=step, rel_tol=rel_tol))

        record(f"sigmoid seed={seed}",
               grad_check(lambda t: tensor.sigmoid(t), [rng.standard_normal((1, 2, 4, 5))],
                          rel_tol, step))
        record(f"elementwise seed={seed}",
               grad_check(
                   lambda a, c: tensor.mean(tensor.mul(tensor.elu(a),
                                                       tensor.downsample_avg(tensor.upsample_nearest(c)))),
                   [rng.standard_normal((1, 2, 4, 6)), rng.standard_normal((1, 2, 4, 6))],
                   rel_tol, step))
        record(f"ssim seed={seed}",
               grad_check(lambda a, b: tensor.mean(losses.ssim(a, b)),
                          [rand_img, rng.uniform(0.05, 0.95, (1, 3, 6, 8))],
                          rel_tol, step))
        record(f"appearance_loss seed={seed}",
               grad_check(lambda a, b: losses.appearance_loss(a, b), [img_a, img_b],
                          rel_tol, step))
        record(f"smoothness_loss seed={seed}",
               grad_check(lambda d, i: losses.smoothness_loss(d, i), [disp, img_a],
                          rel_tol, step))
        record(f"lr_consistency_loss seed={seed}",
               grad_check(lambda dl, dr: losses.lr_consistency_loss(dl, dr), [disp, disp_b],
                          rel_tol, step))
        record(f"warp_horizontal seed={seed}",
               grad_check(lambda i, d: tensor.mean(tensor.warp_horizontal(i, d, "left")),
                          [rand_img, disp], rel_tol, step))
    return results
