"""Structural export of a mask-trained network.

Filters whose gate bit is 0 are physically removed: the producing layer's
weight and bias rows disappear, and every consumer drops the matching input
channel slices, with skip concatenations rewired through explicit per-edge
channel maps. The exported network carries no mask machinery and is checked
output-equivalent to the masked original.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .masking import FilterMask, MaskedConvLayer
from .network import CONV_KINDS, Network, NetworkSpec
from .rng import keyed_rng
from .tensor import Tensor

__all__ = ["PruneReport", "export_pruned", "verify_equivalence", "EquivalenceResult",
           "compression_ratio", "wrap_with_unit_masks"]


@dataclass
class PruneReport:
    """Per-layer keep counts plus the parameter arithmetic of the export."""

    rows: list[tuple[str, int, int, int]]  # (name, n_i, kept, removed)
    params_before: int
    params_after: int

    @property
    def compression_ratio(self) -> float:
        return self.params_before / self.params_after

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.params_after / self.params_before)

    def csv(self) -> str:
        lines = ["layer,n_i,kept,removed"]
        for name, n, kept, removed in self.rows:
            lines.append(f"{name},{n},{kept},{removed}")
        lines.append(f"#params_before,{self.params_before}")
        lines.append(f"#params_after,{self.params_after}")
        lines.append(f"#compression_ratio,{self.compression_ratio!r}")
        lines.append(f"#reduction_percent,{self.reduction_percent!r}")
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        lines = [f"{'layer':<12}{'filters':>8}{'kept':>7}{'removed':>9}"]
        for name, n, kept, removed in self.rows:
            lines.append(f"{name:<12}{n:>8}{kept:>7}{removed:>9}")
        lines.append(f"parameters: {self.params_before} -> {self.params_after} "
                     f"({self.reduction_percent:.1f}% removed, "
                     f"{self.compression_ratio:.2f}x compression)")
        return "\n".join(lines) + "\n"


def compression_ratio(report: PruneReport) -> float:
    return report.compression_ratio


def export_pruned(net: Network) -> tuple[Network, PruneReport]:
    """Physically remove dead filters and rewire all consumers.

    Returns the mask-free pruned network plus the compression report.
    Refuses (naming the layer) if any masked layer would keep zero filters.
    """
    maps = net.keep_maps()
    for ls in net.spec.layers:
        if ls.kind == "masked_conv" and len(maps[ls.name]) == 0:
            raise ConfigError(
                f"layer {ls.name!r} has zero kept filters; export would sever the graph")

    new_layers = []
    for ls in net.spec.layers:
        if ls.kind == "masked_conv":
            new_layers.append(replace(ls, kind="conv", maskable=False,
                                      out_channels=len(maps[ls.name])))
        else:
            new_layers.append(replace(ls))
    new_spec = NetworkSpec(name=net.spec.name + "-pruned", input_hw=net.spec.input_hw,
                           layers=new_layers, scales=net.spec.scales,
                           input_channels=net.spec.input_channels, d_max=net.spec.d_max)
    pruned = Network(new_spec)

    rows = []
    for ls in net.spec.layers:
        if ls.kind not in CONV_KINDS:
            continue
        src_params = net.conv_params(ls.name)
        dst_params = pruned.conv_params(ls.name)
        kept_out = maps[ls.name] if ls.kind == "masked_conv" \
            else np.arange(ls.out_channels)
        kept_in = np.concatenate([
            maps[src] + off for src, off in _input_offsets(net, ls.inputs)])
        dst_params.weights[...] = src_params.weights[np.ix_(kept_out, kept_in)]
        dst_params.bias[...] = src_params.bias[kept_out]
        rows.append((ls.name, ls.out_channels, len(kept_out),
                     ls.out_channels - len(kept_out)))

    report = PruneReport(rows=rows, params_before=net.parameter_count(),
                         params_after=pruned.parameter_count())
    return pruned, report


def _input_offsets(net: Network, inputs) -> list[tuple[str, int]]:
    out = []
    offset = 0
    for src in inputs:
        out.append((src, offset))
        offset += net.info[src][0]
    return out


@dataclass
class EquivalenceResult:
    passed: bool
    max_abs_deviation: float
    trials: int
    first_failing_seed: int | None = None

    def describe(self) -> str:
        if self.passed:
            return (f"equivalent over {self.trials} inputs "
                    f"(max abs deviation {self.max_abs_deviation:.3e})")
        return (f"NOT equivalent: deviation {self.max_abs_deviation:.3e} "
                f"first failing input seed {self.first_failing_seed}")


def verify_equivalence(masked: Network, pruned: Network, trials: int = 100,
                       tol: float = 1e-6, seed: int = 0) -> EquivalenceResult:
    """Compare disparity outputs of two networks on random inputs at all scales."""
    if masked.spec.input_hw != pruned.spec.input_hw or \
            masked.spec.input_channels != pruned.spec.input_channels:
        raise ShapeError("networks have different input contracts")
    h, w = masked.spec.input_hw
    worst = 0.0
    first_fail = None
    for k in range(trials):
        x = keyed_rng(seed, k).random((1, masked.spec.input_channels, h, w),
                                      dtype=np.float32)
        t = Tensor(x)
        outs_a = masked.forward(t)
        outs_b = pruned.forward(t)
        for da, db in zip(outs_a, outs_b):
            for side_a, side_b in ((da.d_l, db.d_l), (da.d_r, db.d_r)):
                dev = float(np.max(np.abs(side_a.data - side_b.data)))
                if dev > worst:
                    worst = dev
                if dev > tol and first_fail is None:
                    first_fail = k
    return EquivalenceResult(passed=first_fail is None, max_abs_deviation=worst,
                             trials=trials, first_failing_seed=first_fail)


def wrap_with_unit_masks(net: Network, mask_value: float = 1.0) -> Network:
    """Re-wrap a mask-free network's prunable convs with all-keep masks.

    The first convolution and the disparity heads stay plain. Useful for
    checking that exporting an already-pruned network is the identity.
    """
    if mask_value < 0:
        raise ConfigError("mask_value must binarize to 1")
    new_layers = []
    for ls in net.spec.layers:
        if ls.kind == "conv" and ls.inputs[0] != "input":
            new_layers.append(replace(ls, kind="masked_conv", maskable=True))
        else:
            new_layers.append(replace(ls))
    spec = NetworkSpec(name=net.spec.name + "-rewrapped", input_hw=net.spec.input_hw,
                       layers=new_layers, scales=net.spec.scales,
                       input_channels=net.spec.input_channels, d_max=net.spec.d_max)
    wrapped = Network(spec)
    for name, params in net._convs.items():
        dst = wrapped.conv_params(name)
        dst.weights[...] = params.weights
        dst.bias[...] = params.bias
    for _, layer in wrapped._masked.items():
        layer.mask.values[...] = np.float32(mask_value)
    return wrapped
