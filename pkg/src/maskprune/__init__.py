"""maskprune: filter pruning with jointly trained per-filter binary masks.

Trains sigmoid-gated binary masks alongside convolution weights via a
straight-through estimator, drives them toward sparsity with a normalized
L1 loss, and exports a physically smaller network that is verified
equivalent to the masked one. Demonstrated end to end on a synthetic
unsupervised stereo-depth task.
"""

from .config import RunConfig, parse_config
from .conv import ConvParams, conv2d_backward, conv2d_forward
from .errors import (ConfigError, DivergenceError, EvaluationError, FormatError,
                     GraphError, MaskpruneError, ShapeError, StateError)
from .gradcheck import GradCheckResult, fd_check, grad_check, run_suite
from .losses import (DisparityMaps, LossReport, LossWeights, StereoPair,
                     appearance_loss, lr_consistency_loss, smoothness_loss, ssim,
                     task_loss)
from .masking import (FilterMask, MaskedConvLayer, binarize, mask_stats,
                      masked_forward, sparsity_loss, ste_backward)
from .metrics import DepthEvalResult, depth_metrics
from .network import Network, NetworkSpec, builtin_spec
from .pruner import PruneReport, compression_ratio, export_pruned, verify_equivalence
from .synth import Scene, SceneSpec, generate
from .tensor import Tensor
from .trainer import Adam, TrainConfig, adam_step, augment, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ConvParams", "conv2d_forward", "conv2d_backward",
    "GradCheckResult", "fd_check", "grad_check", "run_suite",
    "FilterMask", "MaskedConvLayer", "binarize", "masked_forward", "ste_backward",
    "sparsity_loss", "mask_stats",
    "StereoPair", "DisparityMaps", "LossWeights", "LossReport",
    "ssim", "appearance_loss", "smoothness_loss", "lr_consistency_loss", "task_loss",
    "Network", "NetworkSpec", "builtin_spec",
    "TrainConfig", "Adam", "adam_step", "lr_at_epoch", "augment", "train",
    "PruneReport", "export_pruned", "verify_equivalence", "compression_ratio",
    "DepthEvalResult", "depth_metrics",
    "Scene", "SceneSpec", "generate",
    "RunConfig", "parse_config",
    "MaskpruneError", "ShapeError", "ConfigError", "GraphError",
    "StateError", "DivergenceError", "EvaluationError", "FormatError",
    "__version__",
]
