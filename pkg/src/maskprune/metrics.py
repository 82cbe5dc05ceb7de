"""Depth and disparity evaluation metrics.

The depth-space metrics (abs rel, sq rel, RMS, RMS log, delta thresholds)
are computed on cap-clamped depth values. D1-all is the percentage of
pixels whose disparity error exceeds 3 pixels; disparities are derived from
the depths via the configured focal*baseline constant (depth = fb /
disparity), so synthetic scenes supply their own camera.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import EvaluationError, ShapeError

__all__ = ["DepthEvalResult", "depth_metrics", "disparity_to_depth",
           "aggregate_results", "results_csv", "results_text"]

DEFAULT_CAP = (1e-3, 80.0)
D1_PIXEL_THRESHOLD = 3.0


@dataclass
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    d1_all_percent: float
    delta_1: float
    delta_2: float
    delta_3: float

    COLUMNS = ("abs_rel", "sq_rel", "rms", "rms_log", "d1_all_percent",
               "delta_1", "delta_2", "delta_3")


def disparity_to_depth(disparity_px: np.ndarray, focal_baseline: float,
                       cap: tuple[float, float] = DEFAULT_CAP) -> np.ndarray:
    """depth = focal*baseline / disparity, clamped into the cap range."""
    d = np.asarray(disparity_px, dtype=np.float64)
    depth = focal_baseline / np.maximum(d, focal_baseline / cap[1])
    return np.clip(depth, cap[0], cap[1])


def depth_metrics(pred, gt, valid_mask=None, cap: tuple[float, float] = DEFAULT_CAP,
                  focal_baseline: float = 1.0) -> DepthEvalResult:
    """Evaluate predicted depths against ground truth over the valid pixels.

    `pred` and `gt` are depth maps; both are clamped to `cap` before the
    depth metrics. D1-all converts the clamped depths back to disparities
    with `focal_baseline` and counts errors above 3 pixels.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ShapeError(f"pred size {p.size} != gt size {g.size}")
    if valid_mask is not None:
        m = np.asarray(valid_mask).reshape(-1)
        if m.shape != p.shape:
            raise ShapeError(f"valid_mask size {m.size} != pred size {p.size}")
        sel = m > 0.5
        p, g = p[sel], g[sel]
    if p.size == 0:
        raise EvaluationError("no valid pixels to evaluate")

    p = np.clip(p, cap[0], cap[1])
    g = np.clip(g, cap[0], cap[1])
    err = p - g
    ratio = np.maximum(p / g, g / p)
    disp_err = np.abs(focal_baseline / p - focal_baseline / g)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err * err / g)),
        rms=float(np.sqrt(np.mean(err * err))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        d1_all_percent=float(np.mean(disp_err > D1_PIXEL_THRESHOLD) * 100.0),
        delta_1=float(np.mean(ratio < 1.25)),
        delta_2=float(np.mean(ratio < 1.25 ** 2)),
        delta_3=float(np.mean(ratio < 1.25 ** 3)),
    )


def aggregate_results(results: list[DepthEvalResult]) -> DepthEvalResult:
    """Field-wise mean over per-scene results."""
    if not results:
        raise EvaluationError("nothing to aggregate")
    vals = {f.name: float(np.mean([getattr(r, f.name) for r in results]))
            for f in fields(DepthEvalResult)}
    return DepthEvalResult(**vals)


def results_csv(rows: list[tuple[str, DepthEvalResult, int]]) -> str:
    """CSV in the standard comparison-table column order."""
    lines = ["method,abs_rel,sq_rel,rms,rms_log,d1_all,delta_1,delta_2,delta_3,params"]
    for label, r, params in rows:
        vals = ",".join(repr(getattr(r, c)) for c in DepthEvalResult.COLUMNS)
        lines.append(f"{label},{vals},{params}")
    return "\n".join(lines) + "\n"


def results_text(rows: list[tuple[str, DepthEvalResult, int]]) -> str:
    header = (f"{'method':<24}{'Abs Rel':>9}{'Sq Rel':>9}{'RMS':>9}{'RMS log':>9}"
              f"{'D1-all':>9}{'d<1.25':>8}{'d<1.25^2':>10}{'d<1.25^3':>10}{'Params':>10}")
    lines = [header]
    for label, r, params in rows:
        lines.append(f"{label:<24}{r.abs_rel:>9.4f}{r.sq_rel:>9.4f}{r.rms:>9.4f}"
                     f"{r.rms_log:>9.4f}{r.d1_all_percent:>9.3f}{r.delta_1:>8.3f}"
                     f"{r.delta_2:>10.3f}{r.delta_3:>10.3f}{params:>10}")
    return "\n".join(lines) + "\n"
