"""
Test-time views of one image and fusion of their softmax maps.

A view is the image rescaled, then optionally mirrored, then optionally
grayscaled. Predictions on a view are mapped back to the original grid by
undoing the mirror and resizing back, and the aligned maps are averaged.

Views are ordered by scale (ascending), then unflipped before flipped, then
color before gray. The original-resolution color view is always present.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .exceptions import SadaContractError, SadaShapeError, SadaValidationError
from .model import OUTPUT_STRIDE
from .tensor import Tensor, bilinear_resize, record_guard

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)
MIN_VIEW_EXTENT = 4

ArrayOrTensor = Union[np.ndarray, Tensor]


def _data(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


@dataclass(frozen=True)
class ViewSpec:
    """One augmentation of the test image."""

    scale: float = 1.0
    flipped: bool = False
    grayscaled: bool = False

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise SadaValidationError(f"view scale must be positive, got {self.scale}", parameter="scale")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not self.flipped and not self.grayscaled

    def extent(self, size: int) -> int:
        """Scaled extent rounded to the nearest multiple of the network stride."""
        return int(math.floor(size * self.scale / OUTPUT_STRIDE + 0.5)) * OUTPUT_STRIDE

    def label(self) -> str:
        return f"s{self.scale:g}{'-flip' if self.flipped else ''}{'-gray' if self.grayscaled else ''}"


IDENTITY_VIEW = ViewSpec()


@dataclass
class FusedProbMap:
    """Mean of aligned softmax maps (C x H x W) and how many views went in."""

    probs: Tensor
    view_count: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.probs.shape

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


# ============================================
# Pixel-level helpers
# ============================================

def to_grayscale(image: ArrayOrTensor) -> np.ndarray:
    """Luminance (0.299, 0.587, 0.114) replicated to three channels.

    Works on 3 x H x W or N x 3 x H x W arrays.
    """
    x = _data(image)
    if x.shape[-3] != 3:
        raise SadaShapeError(f"grayscale needs 3 channels, got shape {x.shape}", shapes=[x.shape])
    r, g, b = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return np.repeat(y[..., None, :, :], 3, axis=-3).astype(np.float32)


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def _resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if x.shape[-2:] == (out_h, out_w):
        return x
    return bilinear_resize(Tensor(x), out_h, out_w).data


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with half-pixel centers (for label maps)."""
    in_h, in_w = labels.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1)
    return labels[..., rows[:, None], cols[None, :]]


# ============================================
# Views
# ============================================

def view_specs(scales: Sequence[float], use_flip: bool, use_gray: bool) -> list[ViewSpec]:
    """Deterministically ordered view set; scale 1.0 is always included."""
    ordered = sorted(set(float(s) for s in scales) | {1.0})
    flips = (False, True) if use_flip else (False,)
    grays = (False, True) if use_gray else (False,)
    return [ViewSpec(s, f, g) for s in ordered for f in flips for g in grays]


def apply_view(spec: ViewSpec, image: ArrayOrTensor) -> np.ndarray:
    """Render ``spec`` of a 3 x H x W image (resize, then mirror, then gray)."""
    x = _data(image)
    h, w = x.shape[-2:]
    out = _resize(x, spec.extent(h), spec.extent(w))
    if spec.flipped:
        out = hflip(out)
    if spec.grayscaled:
        out = to_grayscale(out)
    return out


def build_views(image: ArrayOrTensor, cfg) -> list[tuple[ViewSpec, Tensor]]:
    """Augmented mini-batch of one image.

    Args:
        image: 3 x H x W image with values in [0, 1]
        cfg: Anything with ``effective_scales``, ``use_flip`` and ``use_gray``
            (an :class:`~sada.config.AdaptConfig`)

    Returns:
        (spec, view) pairs in the canonical order. Views whose scaled extent
        falls below 4 pixels are skipped and logged as guard events.
    """
    x = _data(image)
    if x.ndim != 3 or x.shape[0] != 3:
        raise SadaShapeError(f"build_views expects a 3 x H x W image, got {x.shape}", shapes=[x.shape])
    h, w = x.shape[1:]
    views: list[tuple[ViewSpec, Tensor]] = []
    for spec in view_specs(cfg.effective_scales, cfg.use_flip, cfg.use_gray):
        if min(spec.extent(h), spec.extent(w)) < MIN_VIEW_EXTENT:
            logger.warning(f"Skipping view {spec.label()}: scaled extent below {MIN_VIEW_EXTENT} px for {h}x{w}")
            record_guard("view_skipped")
            continue
        views.append((spec, Tensor(apply_view(spec, x))))
    return views


def transform_map(spec: ViewSpec, probs: ArrayOrTensor) -> Tensor:
    """Forward geometric transform of a C x H x W map into ``spec``'s grid."""
    p = _data(probs)
    h, w = p.shape[-2:]
    out = _resize(p, spec.extent(h), spec.extent(w))
    return Tensor(hflip(out) if spec.flipped else out)


def invert_and_align(spec: ViewSpec, probs: ArrayOrTensor, orig_h: int, orig_w: int) -> Tensor:
    """Map a view's C x h x w prediction back onto the original H x W grid.

    The mirror is undone first, then the map is bilinearly resized; gray
    views need no spatial inverse.
    """
    p = _data(probs)
    if spec.flipped:
        p = hflip(p)
    return Tensor(_resize(p, orig_h, orig_w))


def warp_labels(spec: ViewSpec, labels: np.ndarray) -> np.ndarray:
    """Carry an H x W label map into ``spec``'s grid (nearest sampling)."""
    h, w = labels.shape[-2:]
    out = nearest_resize(labels, spec.extent(h), spec.extent(w))
    return hflip(out) if spec.flipped else np.ascontiguousarray(out)


def fuse(aligned: Sequence[ArrayOrTensor]) -> FusedProbMap:
    """Elementwise mean over views.

    Values at each position are sorted before summation in float64, so the
    result does not depend on the order of ``aligned``.
    """
    if not aligned:
        raise SadaContractError("fuse needs at least one aligned map", parameter="aligned")
    arrays = [_data(a) for a in aligned]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise SadaShapeError("aligned maps must share one shape", shapes=[a.shape for a in arrays])
    stack = np.sort(np.stack(arrays).astype(np.float64), axis=0)
    mean = stack.sum(axis=0) / len(arrays)
    return FusedProbMap(probs=Tensor(mean.astype(np.float32)), view_count=len(arrays))
