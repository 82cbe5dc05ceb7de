"""Plain-text run configuration.

Experiments are defined by a key=value file ('#' starts a comment); every
key has a documented default and unknown keys are rejected. Paths and the
command mode come from CLI flags, never from the file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .network import DEFAULT_D_MAX, DEFAULT_MASK_INIT, NetworkSpec, builtin_spec, BUILTIN_SPECS
from .synth import DEFAULT_FOCAL_BASELINE, SceneSpec
from .trainer import TrainConfig

__all__ = ["RunConfig", "parse_config"]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # optimization
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_halve_start: int = 30
    lr_halve_every: int = 10
    mask_loss_coefficient: float = 1.0
    weight_l1_lambda: float = 0.0
    seed: int = 42
    augment: bool = True
    # masking
    masks: bool = True
    mask_init: float = DEFAULT_MASK_INIT
    mask_threshold: float = 0.5
    # loss shape
    alpha_ap: float = 1.0
    alpha_ds: float = 0.1
    alpha_lr: float = 1.0
    ssim_weight: float = 0.85
    # network
    network: str = "default"
    disparity_cap: float = DEFAULT_D_MAX
    # synthetic scenes
    height: int = 64
    width: int = 128
    planes: int = 4
    scene_d_min: float = 2.0
    scene_d_max: float = 14.0
    train_scenes: int = 256
    eval_scenes: int = 32
    focal_baseline: float = DEFAULT_FOCAL_BASELINE

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
            lr_halve_start=self.lr_halve_start, lr_halve_every=self.lr_halve_every,
            mask_loss_coefficient=self.mask_loss_coefficient,
            weight_l1_lambda=self.weight_l1_lambda, seed=self.seed,
            mask_init=self.mask_init, mask_threshold=self.mask_threshold,
            alpha_ap=self.alpha_ap, alpha_ds=self.alpha_ds, alpha_lr=self.alpha_lr,
            ssim_weight=self.ssim_weight, augment=self.augment)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(height=self.height, width=self.width, planes=self.planes,
                         d_min=self.scene_d_min, d_max=self.scene_d_max,
                         seed=self.seed, focal_baseline=self.focal_baseline)

    def network_spec(self) -> NetworkSpec:
        from .network import without_masks
        if self.network in BUILTIN_SPECS:
            spec = builtin_spec(self.network, (self.height, self.width),
                                d_max=self.disparity_cap)
        else:
            path = Path(self.network)
            if not path.is_file():
                raise ConfigError(
                    f"network {self.network!r} is neither a builtin "
                    f"({sorted(BUILTIN_SPECS)}) nor a spec file")
            spec = NetworkSpec.from_json(path.read_text())
            if spec.input_hw != (self.height, self.width):
                raise ConfigError(
                    f"network file expects input {spec.input_hw}, config says "
                    f"{(self.height, self.width)}")
        if not self.masks:
            spec = without_masks(spec)
        return spec


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {ftype}") from e
    return raw


def parse_config(path) -> RunConfig:
    """Read a key=value file into a RunConfig; unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)
