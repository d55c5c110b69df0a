"""
Thresholded pseudo ground truth from a fused softmax map.

Each class c gets the threshold ``t_c = psi * max over pixels of p[c]``.
A pixel keeps its argmax class c* when ``p[c*] >= t_c*``; otherwise it is
set to :data:`IGNORE`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import sadt
from .augment import FusedProbMap
from .exceptions import SadaContractError, SadaShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

IGNORE = 255

ProbSource = Union[FusedProbMap, Tensor, np.ndarray]


def _probs(fused: ProbSource) -> np.ndarray:
    if isinstance(fused, FusedProbMap):
        fused = fused.probs
    p = fused.data if isinstance(fused, Tensor) else np.asarray(fused, dtype=np.float32)
    if p.ndim != 3:
        raise SadaShapeError(f"expected a C x H x W probability map, got {p.shape}", shapes=[p.shape])
    if p.shape[0] > IGNORE:
        raise SadaShapeError(f"at most {IGNORE} classes fit the label space, got {p.shape[0]}", shapes=[p.shape])
    return p


def _check_psi(psi: float) -> None:
    if not 0.0 <= psi <= 1.0:
        raise SadaContractError(f"psi must lie in [0, 1], got {psi}", parameter="psi")


@dataclass
class PseudoLabelMap:
    """Pseudo ground truth.

    Attributes:
        labels: H x W uint8 class indices, :data:`IGNORE` where unconfident
        thresholds: Per-class thresholds t_c (float64)
        psi: Threshold factor that produced them
        coverage: Fraction of pixels that received a label
    """

    labels: np.ndarray
    thresholds: np.ndarray
    psi: float
    coverage: float

    @property
    def is_empty(self) -> bool:
        return self.coverage == 0.0

    def save(self, path: Union[str, Path]) -> None:
        sadt.save_tensor(path, self.labels)


def class_thresholds(fused: ProbSource, psi: float) -> np.ndarray:
    """t_c = psi * (spatial max of class c), evaluated in float64."""
    _check_psi(psi)
    p = _probs(fused)
    return np.float64(psi) * p.reshape(p.shape[0], -1).max(axis=1).astype(np.float64)


def make_pseudo_gt(fused: ProbSource, psi: float) -> PseudoLabelMap:
    """Argmax labels (ties to the lowest class) kept where ``p[c*] >= t_c*``."""
    p = _probs(fused)
    thresholds = class_thresholds(p, psi)
    best = np.argmax(p, axis=0)
    best_prob = np.take_along_axis(p, best[None], axis=0)[0].astype(np.float64)
    keep = best_prob >= thresholds[best]
    labels = np.where(keep, best, IGNORE).astype(np.uint8)
    coverage = float(keep.mean())
    logger.debug(f"pseudo labels: psi={psi} coverage={coverage:.4f}")
    return PseudoLabelMap(labels=labels, thresholds=thresholds, psi=float(psi), coverage=coverage)
