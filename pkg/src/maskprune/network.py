"""Declarative encoder-decoder networks with maskable convolutions.

A NetworkSpec is an ordered list of layer declarations forming a DAG with a
single image input and one left + one right disparity head per scale.
Validation resolves channel counts and resolution levels up front so that
shape problems surface at build time, not mid-training.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .conv import ConvParams, conv2d_forward
from .errors import GraphError, ShapeError
from .losses import DisparityMaps, StereoPair
from .masking import FilterMask, MaskedConvLayer
from .rng import keyed_rng
from .tensor import (Tensor, concat_channels, downsample_avg, elu, relu,
                     scalar_mul, sigmoid, upsample_nearest)

__all__ = ["LayerSpec", "NetworkSpec", "Network", "builtin_spec", "BUILTIN_SPECS",
           "without_masks"]

CONV_KINDS = ("conv", "masked_conv", "disparity_head")
ALL_KINDS = CONV_KINDS + ("upsample", "downsample", "skip_concat")
ACTIVATIONS = ("elu", "relu", "none")

DEFAULT_MASK_INIT = 0.05
DEFAULT_D_MAX = 0.3


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = -1  # -1 resolves to kernel // 2
    activation: str = "elu"
    maskable: bool = False
    scale: int = -1
    side: str = ""

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        if self.padding == -1:
            self.padding = self.kernel // 2

    def to_dict(self) -> dict:
        return asdict(self) | {"inputs": list(self.inputs)}


@dataclass
class NetworkSpec:
    """Layer graph plus the input contract it was declared for."""

    name: str
    input_hw: tuple[int, int]
    layers: list[LayerSpec]
    scales: int
    input_channels: int = 3
    d_max: float = DEFAULT_D_MAX

    def __post_init__(self):
        self.input_hw = tuple(self.input_hw)
        self.validate()

    def validate(self) -> dict[str, tuple[int, int]]:
        """Check the graph; returns {layer name: (channels, level)}.

        Level counts stride-2 reductions relative to the input resolution.
        """
        info: dict[str, tuple[int, int]] = {"input": (self.input_channels, 0)}
        head_seen: dict[tuple[int, str], str] = {}
        max_level = 0
        for ls in self.layers:
            if ls.name in info or ls.name == "input":
                raise GraphError(f"duplicate layer name {ls.name!r}")
            if ls.kind not in ALL_KINDS:
                raise GraphError(f"layer {ls.name!r}: unknown kind {ls.kind!r}")
            if not ls.inputs:
                raise GraphError(f"layer {ls.name!r} has no inputs")
            for src in ls.inputs:
                if src not in info:
                    raise GraphError(
                        f"edge {src!r} -> {ls.name!r}: {src!r} is not defined before {ls.name!r}")
            in_ch = sum(info[src][0] for src in ls.inputs)
            levels = [info[src][1] for src in ls.inputs]
            if ls.kind in CONV_KINDS:
                if len(ls.inputs) != 1:
                    raise GraphError(f"layer {ls.name!r}: {ls.kind} takes exactly one input")
                if ls.out_channels < 1:
                    raise GraphError(f"layer {ls.name!r}: out_channels must be >= 1")
                if ls.stride not in (1, 2):
                    raise GraphError(f"layer {ls.name!r}: stride must be 1 or 2, got {ls.stride}")
                if ls.activation not in ACTIVATIONS:
                    raise GraphError(f"layer {ls.name!r}: unknown activation {ls.activation!r}")
                level = levels[0] + (1 if ls.stride == 2 else 0)
            elif ls.kind == "upsample":
                if len(ls.inputs) != 1:
                    raise GraphError(f"layer {ls.name!r}: upsample takes exactly one input")
                level = levels[0] - 1
                if level < 0:
                    raise GraphError(f"layer {ls.name!r}: upsample above input resolution")
            elif ls.kind == "downsample":
                if len(ls.inputs) != 1:
                    raise GraphError(f"layer {ls.name!r}: downsample takes exactly one input")
                level = levels[0] + 1
            else:  # skip_concat
                if len(ls.inputs) < 2:
                    raise GraphError(f"layer {ls.name!r}: skip_concat needs at least two inputs")
                if len(set(levels)) != 1:
                    raise GraphError(
                        f"layer {ls.name!r}: concat inputs at different resolutions "
                        f"{dict(zip(ls.inputs, levels))}")
                level = levels[0]

            if ls.kind == "masked_conv":
                if not ls.maskable:
                    raise GraphError(f"layer {ls.name!r}: masked_conv must be maskable")
                if ls.inputs[0] == "input":
                    raise GraphError(
                        f"layer {ls.name!r}: the first convolution (reading the image) is not maskable")
            elif ls.maskable:
                raise GraphError(f"layer {ls.name!r}: kind {ls.kind!r} is never maskable")

            if ls.kind == "disparity_head":
                if ls.out_channels != 1:
                    raise GraphError(f"layer {ls.name!r}: disparity heads emit one channel")
                if not 0 <= ls.scale < self.scales:
                    raise GraphError(
                        f"layer {ls.name!r}: head scale {ls.scale} outside [0, {self.scales})")
                if ls.side not in ("l", "r"):
                    raise GraphError(f"layer {ls.name!r}: head side must be 'l' or 'r'")
                if level != ls.scale:
                    raise GraphError(
                        f"layer {ls.name!r}: head for scale {ls.scale} sits at resolution level {level}")
                key = (ls.scale, ls.side)
                if key in head_seen:
                    raise GraphError(
                        f"layer {ls.name!r}: duplicate head for scale {ls.scale} side {ls.side!r} "
                        f"(already {head_seen[key]!r})")
                head_seen[key] = ls.name
                ch = 1
            elif ls.kind in CONV_KINDS:
                ch = ls.out_channels
            else:
                ch = in_ch

            info[ls.name] = (ch, level)
            max_level = max(max_level, level)

        for s in range(self.scales):
            for side in ("l", "r"):
                if (s, side) not in head_seen:
                    raise GraphError(f"missing disparity head for scale {s} side {side!r}")
        div = 1 << max_level
        h, w = self.input_hw
        if h % div or w % div:
            raise ShapeError(
                f"input dims {self.input_hw} must be divisible by {div} "
                f"(network downsamples {max_level}x)")
        return info

    def input_channels_of(self, ls: LayerSpec, info: dict) -> int:
        return sum(info[src][0] for src in ls.inputs)

    def to_json(self) -> str:
        d = {"name": self.name, "input_hw": list(self.input_hw), "scales": self.scales,
             "input_channels": self.input_channels, "d_max": self.d_max,
             "layers": [ls.to_dict() for ls in self.layers]}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        layers = [LayerSpec(**{**ld, "inputs": tuple(ld["inputs"])}) for ld in d["layers"]]
        return cls(name=d["name"], input_hw=tuple(d["input_hw"]), layers=layers,
                   scales=d["scales"], input_channels=d["input_channels"], d_max=d["d_max"])


def _conv_spec(name, src, out, *, stride=1, masked=False, act="elu", kernel=3):
    kind = "masked_conv" if masked else "conv"
    return LayerSpec(name, kind, (src,), out_channels=out, kernel=kernel,
                     stride=stride, activation=act, maskable=masked)


def _head_specs(src, scale):
    return [LayerSpec(f"disp{scale}_{side}", "disparity_head", (src,), out_channels=1,
                      kernel=3, activation="none", scale=scale, side=side)
            for side in ("l", "r")]


def _default_layers() -> list[LayerSpec]:
    layers = [
        _conv_spec("enc1", "input", 16),
        _conv_spec("enc2", "enc1", 32, stride=2, masked=True),
        _conv_spec("enc3", "enc2", 32, masked=True),
        _conv_spec("enc4", "enc3", 64, stride=2, masked=True),
        _conv_spec("enc5", "enc4", 64, masked=True),
        _conv_spec("enc6", "enc5", 128, stride=2, masked=True),
        _conv_spec("enc7", "enc6", 128, masked=True),
    ]
    layers += _head_specs("enc7", 3)
    layers += [
        LayerSpec("up2", "upsample", ("enc7",)),
        LayerSpec("cat2", "skip_concat", ("up2", "enc5")),
        _conv_spec("dec2", "cat2", 64, masked=True),
    ]
    layers += _head_specs("dec2", 2)
    layers += [
        LayerSpec("up1", "upsample", ("dec2",)),
        LayerSpec("cat1", "skip_concat", ("up1", "enc3")),
        _conv_spec("dec1", "cat1", 32, masked=True),
    ]
    layers += _head_specs("dec1", 1)
    layers += [
        LayerSpec("up0", "upsample", ("dec1",)),
        LayerSpec("cat0", "skip_concat", ("up0", "enc1")),
        _conv_spec("dec0", "cat0", 16, masked=True),
    ]
    layers += _head_specs("dec0", 0)
    return layers


def _tiny_layers() -> list[LayerSpec]:
    layers = [
        _conv_spec("enc1", "input", 8),
        _conv_spec("enc2", "enc1", 16, stride=2, masked=True),
        _conv_spec("enc3", "enc2", 16, masked=True),
        _conv_spec("enc4", "enc3", 32, stride=2, masked=True),
    ]
    layers += _head_specs("enc4", 2)
    layers += [
        LayerSpec("up1", "upsample", ("enc4",)),
        LayerSpec("cat1", "skip_concat", ("up1", "enc3")),
        _conv_spec("dec1", "cat1", 16, masked=True),
    ]
    layers += _head_specs("dec1", 1)
    layers += [
        LayerSpec("up0", "upsample", ("dec1",)),
        LayerSpec("cat0", "skip_concat", ("up0", "enc1")),
        _conv_spec("dec0", "cat0", 8, masked=True),
    ]
    layers += _head_specs("dec0", 0)
    return layers


BUILTIN_SPECS = {
    "default": (_default_layers, 4),
    "tiny": (_tiny_layers, 3),
}


def builtin_spec(name: str, input_hw: tuple[int, int], d_max: float = DEFAULT_D_MAX) -> NetworkSpec:
    if name not in BUILTIN_SPECS:
        raise GraphError(f"unknown builtin network {name!r} (have {sorted(BUILTIN_SPECS)})")
    make_layers, scales = BUILTIN_SPECS[name]
    return NetworkSpec(name=name, input_hw=input_hw, layers=make_layers(),
                       scales=scales, d_max=d_max)


def without_masks(spec: NetworkSpec) -> NetworkSpec:
    """The same architecture with every masked convolution made plain."""
    layers = [replace(ls, kind="conv", maskable=False) if ls.kind == "masked_conv"
              else replace(ls) for ls in spec.layers]
    return NetworkSpec(name=spec.name + "-nomask", input_hw=spec.input_hw,
                       layers=layers, scales=spec.scales,
                       input_channels=spec.input_channels, d_max=spec.d_max)


class Network:
    """Instantiated parameter state for a NetworkSpec."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.info = spec.validate()
        self._convs: dict[str, ConvParams] = {}
        self._masked: dict[str, MaskedConvLayer] = {}
        for ls in spec.layers:
            if ls.kind not in CONV_KINDS:
                continue
            in_ch = spec.input_channels_of(ls, self.info)
            params = ConvParams(in_ch, ls.out_channels, ls.kernel,
                                stride=ls.stride, padding=ls.padding)
            if ls.kind == "masked_conv":
                mask = FilterMask(np.zeros(ls.out_channels, dtype=np.float32))
                self._masked[ls.name] = MaskedConvLayer(params, mask)
            self._convs[ls.name] = params

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int,
              mask_init: float = DEFAULT_MASK_INIT) -> "Network":
        """Deterministically initialize parameters from `seed`.

        Weights use He fan-in scaling; every real-valued mask starts at
        `mask_init`, which must binarize to 1 (all filters kept).
        """
        if mask_init < 0:
            raise GraphError(
                f"mask_init {mask_init} would binarize to 0; masks must start at 1 (kept)")
        net = cls(spec)
        for li, ls in enumerate(spec.layers):
            if ls.kind not in CONV_KINDS:
                continue
            params = net._convs[ls.name]
            rng = keyed_rng(seed, li)
            fan_in = params.in_channels * params.kernel_size ** 2
            std = np.sqrt(2.0 / fan_in)
            params.weights[...] = rng.standard_normal(params.weights.shape,
                                                      dtype=np.float32) * np.float32(std)
            params.bias[...] = 0.0
            if ls.kind == "masked_conv":
                net._masked[ls.name].mask.values[...] = np.float32(mask_init)
        return net

    # ------------------------------------------------------------------
    # execution
    # ------------------------------------------------------------------

    def forward(self, x) -> list[DisparityMaps]:
        """Run the graph on a batch (Tensor or StereoPair; uses the left view).

        Returns one DisparityMaps per scale, full resolution first; values
        are bounded to [0, d_max] by a scaled sigmoid on each head.
        """
        if isinstance(x, StereoPair):
            x = x.left
        n, c, h, w = x.shape
        if c != self.spec.input_channels or (h, w) != self.spec.input_hw:
            raise ShapeError(
                f"input shape {x.shape} does not match spec "
                f"(channels {self.spec.input_channels}, hw {self.spec.input_hw})")
        values: dict[str, Tensor] = {"input": x}
        heads: dict[tuple[int, str], Tensor] = {}
        for ls in self.spec.layers:
            srcs = [values[s] for s in ls.inputs]
            if ls.kind == "conv":
                out = self._activate(conv2d_forward(srcs[0], self._convs[ls.name]), ls.activation)
            elif ls.kind == "masked_conv":
                out = self._activate(self._masked[ls.name].forward(srcs[0]), ls.activation)
            elif ls.kind == "disparity_head":
                out = scalar_mul(sigmoid(conv2d_forward(srcs[0], self._convs[ls.name])),
                                 self.spec.d_max)
                heads[(ls.scale, ls.side)] = out
            elif ls.kind == "upsample":
                out = upsample_nearest(srcs[0])
            elif ls.kind == "downsample":
                out = downsample_avg(srcs[0])
            else:
                out = concat_channels(srcs)
            values[ls.name] = out
        return [DisparityMaps(d_l=heads[(s, "l")], d_r=heads[(s, "r")])
                for s in range(self.spec.scales)]

    @staticmethod
    def _activate(t: Tensor, activation: str) -> Tensor:
        if activation == "elu":
            return elu(t)
        if activation == "relu":
            return relu(t)
        return t

    # ------------------------------------------------------------------
    # parameter access
    # ------------------------------------------------------------------

    def conv_params(self, name: str) -> ConvParams:
        return self._convs[name]

    def masked_layer(self, name: str) -> MaskedConvLayer:
        return self._masked[name]

    def mask_registry(self) -> list[tuple[str, FilterMask]]:
        return [(name, self._masked[name].mask) for name in self._masked]

    def trainables(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for name, params in self._convs.items():
            out.append((f"{name}.weights", params.weights, params.grad_weights))
            out.append((f"{name}.bias", params.bias, params.grad_bias))
        for name, layer in self._masked.items():
            out.append((f"{name}.mask", layer.mask.values, layer.mask.grad))
        return out

    def zero_grads(self) -> None:
        for params in self._convs.values():
            params.zero_grads()
        for layer in self._masked.values():
            layer.mask.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: data for name, data, _ in self.trainables()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for name, data, _ in self.trainables():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing parameter {name!r}")
            src = np.asarray(arrays[name], dtype=data.dtype).reshape(data.shape)
            data[...] = src

    # ------------------------------------------------------------------
    # counting and pruning support
    # ------------------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.parameter_count() for p in self._convs.values())

    def keep_maps(self) -> dict[str, np.ndarray]:
        """Kept output-channel indices per layer (and 'input'), following masks."""
        maps: dict[str, np.ndarray] = {"input": np.arange(self.spec.input_channels)}
        for ls in self.spec.layers:
            if ls.kind == "masked_conv":
                maps[ls.name] = self._masked[ls.name].mask.kept_indices()
            elif ls.kind in CONV_KINDS:
                maps[ls.name] = np.arange(ls.out_channels)
            elif ls.kind == "skip_concat":
                parts = []
                offset = 0
                for src in ls.inputs:
                    parts.append(maps[src] + offset)
                    offset += self.info[src][0]
                maps[ls.name] = np.concatenate(parts)
            else:
                maps[ls.name] = maps[ls.inputs[0]]
        return maps

    def masked_parameter_count(self) -> int:
        """Parameters that would remain after structurally removing dead filters."""
        maps = self.keep_maps()
        total = 0
        for ls in self.spec.layers:
            if ls.kind not in CONV_KINDS:
                continue
            kept_out = len(maps[ls.name]) if ls.kind == "masked_conv" else ls.out_channels
            kept_in = sum(len(maps[src]) for src in ls.inputs)
            total += kept_out * kept_in * ls.kernel ** 2 + kept_out
        return total
