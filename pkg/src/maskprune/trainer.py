"""Joint optimization of weights and masks.

One Adam optimizer updates convolution weights, biases, and real-valued
masks together. The step objective is task loss + coefficient * mask
sparsity (+ optional L1 on conv weights); the sparsity gradient reaches
each real mask through the straight-through sigmoid chain. All randomness
(shuffling, augmentation) is keyed by (seed, epoch, sample index), so runs
are bitwise reproducible and resumable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fileio
from .errors import ConfigError, DivergenceError
from .losses import LossReport, LossWeights, StereoPair, task_loss
from .masking import mask_stats, sparsity_loss
from .network import DEFAULT_MASK_INIT, Network, NetworkSpec
from .rng import keyed_rng
from .tensor import Tensor, _sigmoid_raw

__all__ = [
    "TrainConfig", "Adam", "adam_step", "lr_at_epoch", "augment", "augment_arrays",
    "train", "TrainResult", "save_checkpoint", "load_checkpoint",
    "apply_mask_sparsity_grads", "apply_weight_l1_grads", "weight_l1_value",
]

log = logging.getLogger("maskprune.trainer")


@dataclass
class TrainConfig:
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
    mask_init: float = DEFAULT_MASK_INIT
    mask_threshold: float = 0.5
    alpha_ap: float = 1.0
    alpha_ds: float = 0.1
    alpha_lr: float = 1.0
    ssim_weight: float = 0.85
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("invalid optimizer settings")
        if self.lr_halve_start < 0 or self.lr_halve_every < 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.mask_loss_coefficient < 0 or self.weight_l1_lambda < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if not 0 <= self.ssim_weight <= 1:
            raise ConfigError(f"ssim_weight must lie in [0,1], got {self.ssim_weight}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha_ap, self.alpha_ds, self.alpha_lr)

    def label(self) -> str:
        base = "L_task" if self.mask_loss_coefficient == 0 else "L_total"
        return base + (f"+wL1({self.weight_l1_lambda:g})" if self.weight_l1_lambda > 0 else "")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Base rate until the halving schedule starts, then halve every period."""
    if epoch < config.lr_halve_start:
        return config.lr
    halvings = (epoch - config.lr_halve_start) // config.lr_halve_every + 1
    return config.lr * 0.5 ** halvings


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; mutates param and moments in place."""
    m[...] = beta1 * m + (1.0 - beta1) * grad
    v[...] = beta2 * v + (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param[...] = param - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a network's named trainables (weights, biases, masks)."""

    def __init__(self, trainables, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.entries = list(trainables)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(data) for name, data, _ in self.entries}
        self.v = {name: np.zeros_like(data) for name, data, _ in self.entries}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, data, grad in self.entries:
            adam_step(data, grad, self.m[name], self.v[name], self.t, lr,
                      self.beta1, self.beta2, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name][...] = arrays[f"adam.m.{name}"].reshape(self.m[name].shape)
            self.v[name][...] = arrays[f"adam.v.{name}"].reshape(self.v[name].shape)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment_arrays(left: np.ndarray, right: np.ndarray,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flip-and-swap with p=0.5 plus shared color jitter, clamped to [0,1].

    A horizontal flip swaps the eyes (the flipped right image becomes the new
    left view), keeping the pair geometrically consistent. Gamma, brightness,
    and per-channel gains are drawn once and applied to both images.
    """
    do_flip = rng.random() < 0.5
    gamma = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(0.8, 1.2)
    gains = rng.uniform(0.8, 1.2, 3).astype(np.float32).reshape(3, 1, 1)
    if do_flip:
        left, right = right[..., ::-1], left[..., ::-1]

    def color(img: np.ndarray) -> np.ndarray:
        out = np.power(img, np.float32(gamma)) * np.float32(brightness) * gains
        return np.clip(out, 0.0, 1.0, out=out)

    return color(left.astype(np.float32)), color(right.astype(np.float32))


def augment(pair: StereoPair, rng: np.random.Generator) -> StereoPair:
    left, right = augment_arrays(pair.left.data, pair.right.data, rng)
    return StereoPair(Tensor(left), Tensor(right))


# ---------------------------------------------------------------------------
# auxiliary loss plumbing
# ---------------------------------------------------------------------------

def apply_mask_sparsity_grads(net: Network, coefficient: float) -> float:
    """Add the sparsity-loss gradient to every real mask; returns the loss value.

    Each gate bit receives 1/total from the kept-filter ratio; the real value
    receives that times the sigmoid derivative (straight-through chain),
    scaled by `coefficient`.
    """
    registry = net.mask_registry()
    value, per_bit = sparsity_loss(m for _, m in registry)
    if coefficient != 0.0:
        for _, mask in registry:
            sig = _sigmoid_raw(mask.values.astype(np.float64))
            mask.grad += (coefficient * per_bit * sig * (1.0 - sig)).astype(mask.grad.dtype)
    return value


def weight_l1_value(net: Network) -> float:
    return float(sum(np.abs(p.weights).sum(dtype=np.float64) for p in net._convs.values()))


def apply_weight_l1_grads(net: Network, lam: float) -> None:
    for params in net._convs.values():
        params.grad_weights += (lam * np.sign(params.weights)).astype(params.grad_weights.dtype)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: Network
    adam: Adam
    step_reports: list[LossReport] = field(default_factory=list)
    sparsity_history: list[float] = field(default_factory=list)
    mask_history: list[tuple[int, list]] = field(default_factory=list)
    label: str = ""


def train(net: Network, scenes, config: TrainConfig, *, start_epoch: int = 0,
          adam: Adam | None = None) -> TrainResult:
    """Run the optimization loop over a scene list.

    Deterministic given (config, seed, start state); augmentation draws are
    keyed by (seed, epoch, scene index). Raises DivergenceError if the total
    loss stops being finite.
    """
    if not scenes:
        raise ConfigError("training needs a non-empty dataset")
    registry = net.mask_registry()
    have_masks = bool(registry)
    weights = config.loss_weights()
    if adam is None:
        adam = Adam(net.trainables(), config.beta1, config.beta2, config.epsilon)
    result = TrainResult(net=net, adam=adam, label=config.label())
    step = start_epoch * (len(scenes) // config.batch_size)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = keyed_rng(config.seed, epoch, 0xB00C).permutation(len(scenes))
        n_batches = len(order) // config.batch_size
        if n_batches == 0:
            raise ConfigError(
                f"batch_size {config.batch_size} exceeds dataset size {len(scenes)}")
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lefts, rights = [], []
            for i in idx:
                scene = scenes[int(i)]
                if config.augment:
                    l, r = augment_arrays(scene.left[0], scene.right[0],
                                          keyed_rng(config.seed, epoch, int(i)))
                else:
                    l, r = scene.left[0], scene.right[0]
                lefts.append(l)
                rights.append(r)
            pair = StereoPair(Tensor(np.stack(lefts)), Tensor(np.stack(rights)))

            net.zero_grads()
            disparities = net.forward(pair.left)
            total_t, report = task_loss(pair, disparities, weights, config.ssim_weight)
            total_t.backward()
            mask_value = apply_mask_sparsity_grads(net, config.mask_loss_coefficient) \
                if have_masks else 0.0
            wl1 = 0.0
            if config.weight_l1_lambda > 0:
                wl1 = weight_l1_value(net)
                apply_weight_l1_grads(net, config.weight_l1_lambda)
            l_total = (report.l_total + config.mask_loss_coefficient * mask_value
                       + config.weight_l1_lambda * wl1)
            if not np.isfinite(l_total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"task={report.l_total} mask={mask_value} weight_l1={wl1}")
            adam.step(lr)

            report.step = step
            report.l_mask = mask_value
            report.l_weight_l1 = wl1
            report.l_total = l_total
            result.step_reports.append(report)
            step += 1

        sparsity = sparsity_loss(m for _, m in registry)[0] if have_masks else 1.0
        result.sparsity_history.append(sparsity)
        result.mask_history.append((epoch, mask_stats(registry)))
        log.info("epoch %d/%d lr=%.2e task=%.4f sparsity=%.4f",
                 epoch + 1, config.epochs, lr, result.step_reports[-1].l_ap, sparsity)
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, net: Network, adam: Adam | None, epoch: int,
                    config: TrainConfig | None = None, label: str = "",
                    flags: int = 0) -> None:
    """Save parameters, masks, optimizer moments, and run metadata."""
    arrays = dict(net.state_dict())
    if adam is not None:
        arrays.update(adam.state_arrays())
    meta = {
        "epoch": epoch,
        "adam_t": adam.t if adam is not None else 0,
        "label": label,
        "spec": json.loads(net.spec.to_json()),
        "config": asdict(config) if config is not None else {},
    }
    fileio.write_checkpoint(path, arrays, meta=meta, flags=flags)


def load_checkpoint(path) -> tuple[Network, dict, int, Adam | None]:
    """Rebuild the network (and optimizer state, when present) from a file."""
    arrays, meta, flags = fileio.read_checkpoint(path)
    spec = NetworkSpec.from_json(json.dumps(meta["spec"]))
    net = Network(spec)
    net.load_state_dict(arrays)
    adam = None
    if any(name.startswith("adam.m.") for name in arrays):
        cfg = meta.get("config", {})
        adam = Adam(net.trainables(), cfg.get("beta1", 0.9), cfg.get("beta2", 0.999),
                    cfg.get("epsilon", 1e-8))
        adam.load_state_arrays(arrays, int(meta.get("adam_t", 0)))
    return net, meta, flags, adam
