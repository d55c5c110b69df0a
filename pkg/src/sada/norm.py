"""
Batch normalization and self-adaptive normalization (SaN).

At training time a :class:`BatchNorm2d` normalizes with the statistics of the
current batch and tracks running statistics. At inference time it blends the
running (source) statistics with the statistics of each input view:

    mean_t = (1 - alpha) * mean_s + alpha * mean(view)
    var_t  = (1 - alpha) * var_s  + alpha * var(view)

``alpha = 0`` is plain inference-mode BN (t-BN), ``alpha = 1`` is instance
normalization of every view (p-BN at batch size 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol, Union

import numpy as np

from .exceptions import SadaContractError, SadaValidationError
from .tensor import Function, Tensor

logger = logging.getLogger(__name__)

DEFAULT_MOMENTUM = 0.1
DEFAULT_EPS = 1e-5


class NormMode(str, Enum):
    """Which statistics normalization layers use at inference."""

    TRAIN_BN = "tbn"
    PRED_BN = "pbn"
    SAN = "san"


@dataclass(frozen=True)
class SanConfig:
    """Inference normalization setting.

    Attributes:
        alpha: Blend weight of the per-view statistics, in [0, 1]
        mode: TRAIN_BN forces alpha 0, PRED_BN forces alpha 1, SAN uses ``alpha``
    """

    alpha: float = 0.1
    mode: NormMode = NormMode.SAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", NormMode(self.mode))
        if not 0.0 <= self.alpha <= 1.0:
            raise SadaValidationError(
                f"alpha must lie in [0, 1], got {self.alpha}",
                parameter="alpha",
            )

    @property
    def effective_alpha(self) -> float:
        if self.mode is NormMode.TRAIN_BN:
            return 0.0
        if self.mode is NormMode.PRED_BN:
            return 1.0
        return float(self.alpha)

    @classmethod
    def tbn(cls) -> "SanConfig":
        return cls(alpha=0.0, mode=NormMode.TRAIN_BN)

    @classmethod
    def pbn(cls) -> "SanConfig":
        return cls(alpha=1.0, mode=NormMode.PRED_BN)

    @classmethod
    def san(cls, alpha: float) -> "SanConfig":
        return cls(alpha=alpha, mode=NormMode.SAN)


@dataclass
class NormStats:
    """Per-channel mean and biased variance.

    ``mean``/``var`` are float32 vectors of length C, or C-wide rows stacked
    per view (N x C) for per-view statistics.
    """

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)
        if self.mean.shape != self.var.shape:
            raise SadaContractError(
                f"mean and var shapes differ: {self.mean.shape} vs {self.var.shape}",
                parameter="var",
            )
        if (self.var < 0).any():
            raise SadaContractError("variance must be non-negative", parameter="var")

    @property
    def channels(self) -> int:
        return self.mean.shape[-1]

    def copy(self) -> "NormStats":
        return NormStats(self.mean.copy(), self.var.copy(), self.count)


def _moments(x: np.ndarray, axes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass mean and biased variance, accumulated in float64."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=axes, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=axes)
    return mean.squeeze(axis=axes).astype(np.float32), var.astype(np.float32)


def batch_stats(x: np.ndarray) -> NormStats:
    """Statistics over batch and spatial axes of an NCHW array."""
    n, _, h, w = x.shape
    mean, var = _moments(x, (0, 2, 3))
    return NormStats(mean, var, count=n * h * w)


def view_stats(x: np.ndarray) -> NormStats:
    """Statistics over the spatial axes of every view separately (N x C rows)."""
    _, _, h, w = x.shape
    mean, var = _moments(x, (2, 3))
    return NormStats(mean, var, count=h * w)


def compute_sample_stats(z: Tensor) -> NormStats:
    """Channel statistics of a single datum (batch extent must be 1).

    Example:
        >>> compute_sample_stats(Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])).var
        array([5.], dtype=float32)
    """
    if z.ndim != 4 or z.shape[0] != 1:
        raise SadaContractError(
            f"compute_sample_stats needs a 1 x C x H x W tensor, got {z.shape}",
            parameter="z",
        )
    stats = view_stats(z.data)
    return NormStats(stats.mean[0], stats.var[0], count=stats.count)


def interpolate_stats(source: NormStats, target: NormStats, alpha: float) -> NormStats:
    """Convex blend of source and target statistics.

    The blend is evaluated in float64 and rounded once, so alpha 0 and 1
    reproduce their operand exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise SadaContractError(f"alpha must lie in [0, 1], got {alpha}", parameter="alpha")
    a = np.float64(alpha)
    mean = (1.0 - a) * source.mean.astype(np.float64) + a * target.mean.astype(np.float64)
    var = (1.0 - a) * source.var.astype(np.float64) + a * target.var.astype(np.float64)
    return NormStats(mean.astype(np.float32), var.astype(np.float32), count=target.count)


class _NormalizeConst(Function):
    """(x - mean) / sqrt(var + eps) with statistics held constant in backward."""

    def forward(self, x: np.ndarray, mean: np.ndarray = None, var: np.ndarray = None, eps: float = DEFAULT_EPS) -> np.ndarray:
        m = mean[:, :, None, None]
        self.std = np.sqrt(var + np.float32(eps))[:, :, None, None]
        return (x - m) / self.std

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad / self.std,)


class _NormalizeBatch(Function):
    """(x - mean) / sqrt(var + eps) with the batch statistics differentiated."""

    def forward(self, x: np.ndarray, mean: np.ndarray = None, var: np.ndarray = None, eps: float = DEFAULT_EPS) -> np.ndarray:
        self.std = np.sqrt(var + np.float32(eps))[None, :, None, None]
        self.x_hat = (x - mean[None, :, None, None]) / self.std
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        return self.x_hat

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        axes = (0, 2, 3)
        n = np.float32(self.count)
        sum_g = grad.sum(axis=axes, keepdims=True)
        sum_gx = (grad * self.x_hat).sum(axis=axes, keepdims=True)
        return (((n * grad - sum_g - self.x_hat * sum_gx) / (n * self.std)).astype(np.float32),)


class BatchNorm2d:
    """Batch normalization over NCHW input with SaN inference.

    Attributes:
        gamma, beta: Learnable per-channel affine parameters
        running: Running source statistics
        momentum: Running-statistics update weight of the new batch
        eps: Variance floor added before the square root
        training: Training mode flag (batch statistics + running update)
        norm_cfg: Inference normalization setting
    """

    def __init__(
        self,
        channels: int,
        momentum: float = DEFAULT_MOMENTUM,
        eps: float = DEFAULT_EPS,
    ) -> None:
        if not 0.0 < momentum < 1.0:
            raise SadaValidationError(f"momentum must lie in (0, 1), got {momentum}", parameter="momentum")
        if eps <= 0:
            raise SadaValidationError(f"eps must be positive, got {eps}", parameter="eps")
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running = NormStats(np.zeros(channels), np.ones(channels), count=0)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.norm_cfg = SanConfig.tbn()

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            return bn_train_forward(self, x)
        return san_forward(self, self.norm_cfg, x)

    def _affine(self, x_hat: Tensor) -> Tensor:
        shape = (1, self.channels, 1, 1)
        return x_hat * self.gamma.reshape(shape) + self.beta.reshape(shape)


def bn_train_forward(layer: BatchNorm2d, x: Tensor) -> Tensor:
    """Normalize with current-batch statistics and update the running ones.

    Raises:
        SadaContractError: If fewer than two values per channel are available
    """
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise SadaContractError(
            f"expected N x {layer.channels} x H x W input, got {x.shape}",
            parameter="x",
        )
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise SadaContractError(
            f"batch statistics need at least 2 values per channel, got {n * h * w}",
            parameter="x",
        )
    stats = batch_stats(x.data)
    x_hat = _NormalizeBatch.apply(x, mean=stats.mean, var=stats.var, eps=layer.eps)

    m = np.float32(layer.momentum)
    layer.running = NormStats(
        (1 - m) * layer.running.mean + m * stats.mean,
        (1 - m) * layer.running.var + m * stats.var,
        count=layer.running.count + stats.count,
    )
    return layer._affine(x_hat)


def san_forward(layer: BatchNorm2d, cfg: SanConfig, x: Tensor) -> Tensor:
    """Inference normalization with per-view blended statistics.

    Each batch element is a separate view: its own spatial statistics are
    blended with the running statistics using ``cfg``'s effective alpha. The
    blended statistics are constants for backward; gamma and beta (and the
    input) still receive gradients.
    """
    alpha = cfg.effective_alpha
    if not 0.0 <= alpha <= 1.0:
        raise SadaContractError(f"alpha must lie in [0, 1], got {alpha}", parameter="alpha")
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise SadaContractError(
            f"expected N x {layer.channels} x H x W input, got {x.shape}",
            parameter="x",
        )
    n = x.shape[0]
    if alpha == 0.0:
        mean = np.broadcast_to(layer.running.mean, (n, layer.channels))
        var = np.broadcast_to(layer.running.var, (n, layer.channels))
    else:
        blended = interpolate_stats(layer.running, view_stats(x.data), alpha)
        mean, var = blended.mean, blended.var
    x_hat = _NormalizeConst.apply(x, mean=mean, var=var, eps=layer.eps)
    return layer._affine(x_hat)


class _HasNormLayers(Protocol):
    def norm_layers(self) -> list[BatchNorm2d]: ...


def set_norm_mode(model: Union[_HasNormLayers, Iterable[BatchNorm2d]], cfg: SanConfig) -> None:
    """Route every normalization layer's inference path through ``cfg``.

    Training-mode forwards are unaffected.
    """
    layers = model.norm_layers() if hasattr(model, "norm_layers") else list(model)
    for layer in layers:
        layer.norm_cfg = cfg
    logger.debug(f"normalization set to {cfg.mode.value} (alpha={cfg.effective_alpha}) on {len(layers)} layers")
