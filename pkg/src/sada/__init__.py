"""
sada - self-adaptive inference for semantic segmentation.

Per-sample normalization statistics (SaN) and per-sample fine-tuning on
self-generated pseudo labels, evaluated on a procedurally generated
domain-shift benchmark.

Quick Start:
    >>> from sada import generate, read_manifest, TinySegNet, TrainRecipe, train_source
    >>> generate("data/source", "source", n=200, seed=0)
    >>> net = TinySegNet()
    >>> train_source(net, read_manifest("data/source"), TrainRecipe(epochs=40))

    >>> from sada import AdaptConfig, adapt_one, evaluate_set
    >>> mask, report = adapt_one(net, image, AdaptConfig(alpha=0.1, psi=0.7))
    >>> evaluate_set(net, read_manifest("data/targetB"), "adapt", AdaptConfig()).aggregate["miou"]

Caching:
    >>> from sada import cache
    >>> cache.stats()  # decoded-sample cache statistics
    >>> cache.clear()

Error Handling:
    >>> from sada import SadaError, SadaArchitectureError
    >>> try:
    ...     load_checkpoint("net.sack", TinySegNet(num_classes=3))
    ... except SadaArchitectureError as e:
    ...     print(e.message)
"""

from .tensor import (
    GuardCounter,
    Tensor,
    bilinear_resize,
    conv2d,
    cross_entropy,
    entropy_loss,
    gradcheck,
    no_grad,
)
from .norm import BatchNorm2d, NormMode, NormStats, SanConfig, interpolate_stats, set_norm_mode
from .model import (
    Checkpoint,
    ParamSnapshot,
    TinySegNet,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    select_params,
    snapshot_params,
)
from .augment import FusedProbMap, ViewSpec, build_views, fuse, invert_and_align, transform_map
from .pseudo_label import IGNORE, PseudoLabelMap, class_thresholds, make_pseudo_gt
from .config import AdaptConfig, RunConfig, TrainRecipe, build_run_config, config_hash
from .optim import SGD, poly_lr
from .adapt import AdaptReport, adapt_one, entropy_adapt, predict_plain, tta_predict
from .synth import Dataset, SceneSpec, ShiftSpec, apply_shift, generate, read_manifest, render_scene
from .train import TrainResult, train_source
from .metrics import CalibrationHistogram, ConfusionMatrix, ece, miou
from .core import EvalResult, ablate, evaluate_set, run_method, select, sweep

from .types import METHODS, SPLITS

# Cache module
from . import cache

# Exceptions
from .exceptions import (
    SadaError,
    SadaShapeError,
    SadaContractError,
    SadaValidationError,
    SadaArtifactError,
    SadaArchitectureError,
    SadaTrainingError,
    SadaDataError,
)

__version__ = "0.1.0"

__all__ = [
    # Tensors
    "Tensor",
    "GuardCounter",
    "no_grad",
    "conv2d",
    "bilinear_resize",
    "cross_entropy",
    "entropy_loss",
    "gradcheck",
    # Normalization
    "BatchNorm2d",
    "NormMode",
    "NormStats",
    "SanConfig",
    "interpolate_stats",
    "set_norm_mode",
    # Model
    "TinySegNet",
    "Checkpoint",
    "ParamSnapshot",
    "snapshot_params",
    "restore_params",
    "select_params",
    "save_checkpoint",
    "load_checkpoint",
    # Views and pseudo labels
    "ViewSpec",
    "FusedProbMap",
    "build_views",
    "transform_map",
    "invert_and_align",
    "fuse",
    "IGNORE",
    "PseudoLabelMap",
    "class_thresholds",
    "make_pseudo_gt",
    # Adaptation
    "AdaptConfig",
    "AdaptReport",
    "SGD",
    "poly_lr",
    "predict_plain",
    "adapt_one",
    "tta_predict",
    "entropy_adapt",
    # Data and training
    "SceneSpec",
    "ShiftSpec",
    "Dataset",
    "render_scene",
    "apply_shift",
    "generate",
    "read_manifest",
    "TrainRecipe",
    "TrainResult",
    "train_source",
    # Evaluation
    "ConfusionMatrix",
    "CalibrationHistogram",
    "miou",
    "ece",
    "EvalResult",
    "evaluate_set",
    "run_method",
    "sweep",
    "select",
    "ablate",
    # Config
    "RunConfig",
    "build_run_config",
    "config_hash",
    "METHODS",
    "SPLITS",
    # Cache
    "cache",
    # Exceptions
    "SadaError",
    "SadaShapeError",
    "SadaContractError",
    "SadaValidationError",
    "SadaArtifactError",
    "SadaArchitectureError",
    "SadaTrainingError",
    "SadaDataError",
]
