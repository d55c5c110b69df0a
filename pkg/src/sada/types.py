"""Type definitions for sada."""

from typing import Literal, Optional, TypedDict

# Dataset splits produced by the generator
Split = Literal["source", "val", "targetA", "targetB", "targetC"]
TARGET_SPLITS: tuple[str, ...] = ("targetA", "targetB", "targetC")
SPLITS: tuple[str, ...] = ("source", "val") + TARGET_SPLITS

# Evaluation methods
Method = Literal["tbn", "pbn", "san", "tta", "adapt", "entropy"]
METHODS: tuple[str, ...] = ("tbn", "pbn", "san", "tta", "adapt", "entropy")

# Sweepable parameters
SweepParam = Literal["alpha", "psi", "eta", "iters", "groups"]
SWEEP_PARAMS: tuple[str, ...] = ("alpha", "psi", "eta", "iters", "groups")


class ManifestEntry(TypedDict, total=False):
    """One line of a dataset manifest (paths relative to the manifest)."""
    id: str
    image: str
    mask: str
    domain: str
    seed: int
    shift: float


class ImageRecord(TypedDict, total=False):
    """Per-image line of the metrics stream."""
    id: str
    method: str
    miou: Optional[float]
    per_class_iou: list[Optional[float]]
    ece: Optional[float]
    coverage: list[float]
    losses: list[float]
    wall_ms: float
    guards: dict[str, int]
    skipped: int
    config_hash: str
    error: str


class HistogramDump(TypedDict):
    """Raw reliability histogram (10 right-closed bins over (0, 1])."""
    count: list[int]
    conf_sum: list[float]
    correct: list[int]


class AggregateReport(TypedDict):
    """Dataset-level summary written next to the metrics stream."""
    method: str
    miou: Optional[float]
    per_class: list[Optional[float]]
    ece: Optional[float]
    n_images: int
    n_errors: int
    n_pixels: int
    mean_coverage: Optional[float]
    histogram: HistogramDump
    config_hash: str
