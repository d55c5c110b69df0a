"""
Procedural segmentation scenes with a controllable covariate shift.

A scene is a 64x64 canvas with 2-5 flat-colored objects drawn in order:

    0 background, 1 disk, 2 rectangle, 3 triangle, 4 stripe

Masks are rasterized from the same analytic shapes as the image (a pixel is
covered when its center lies inside the shape), so labels are exact.

Splits and their shift strength / hue direction:

    source   s=0
    val      s=0.35  (+)
    targetA  s=0.5   (-)
    targetB  s=0.7   (+)
    targetC  s=0.9   (-)

Every random draw is keyed by (split, index, seed), so any subset of a split
can be regenerated independently and in any order.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import sadt
from .cache import LRUCache, get_cache
from .exceptions import SadaDataError, SadaValidationError
from .rng import child_seed, keyed_rng
from .types import SPLITS, ManifestEntry

logger = logging.getLogger(__name__)

CANVAS = 64
NUM_CLASSES = 5
CLASS_NAMES = ("background", "disk", "rectangle", "triangle", "stripe")
MANIFEST_NAME = "manifest.jsonl"
RENDER_NOISE = 0.02

PALETTE = np.array(
    [
        [0.50, 0.50, 0.50],
        [0.85, 0.25, 0.20],
        [0.20, 0.35, 0.85],
        [0.25, 0.75, 0.30],
        [0.92, 0.82, 0.20],
    ],
    dtype=np.float64,
)

# RGB <-> YIQ; rotating (I, Q) keeps luminance Y fixed.
_RGB2YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


# ============================================
# Scene description
# ============================================

@dataclass(frozen=True)
class Shape:
    """One object. ``params`` depend on the class:

    disk (cx, cy, r); rectangle (x0, y0, x1, y1); triangle (ax, ay, bx, by,
    cx, cy); stripe (angle, offset, half_width) measured from the canvas center.
    """

    cls: int
    params: tuple[float, ...]
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    shapes: tuple[Shape, ...]
    background: tuple[float, float, float] = tuple(PALETTE[0])
    size: int = CANVAS
    noise: float = RENDER_NOISE


@dataclass(frozen=True)
class ShiftSpec:
    """Covariate shift of strength ``strength`` in [0, 1].

    brightness offset 0.25 s, contrast 1 + 0.6 s, hue rotation 30 s degrees
    (sign from ``hue_sign``), Gaussian noise 0.02 + 0.06 s, box blur radius
    round(2 s). ``strength`` 0 is the identity.
    """

    strength: float = 0.0
    hue_sign: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.strength <= 1.0:
            raise SadaValidationError(
                f"shift strength must lie in [0, 1], got {self.strength}",
                parameter="strength",
            )
        if self.hue_sign not in (-1, 1):
            raise SadaValidationError(
                f"hue_sign must be +1 or -1, got {self.hue_sign}",
                parameter="hue_sign",
                valid_values=[-1, 1],
            )

    @property
    def brightness(self) -> float:
        return 0.25 * self.strength

    @property
    def contrast(self) -> float:
        return 1.0 + 0.6 * self.strength

    @property
    def hue_degrees(self) -> float:
        return 30.0 * self.strength * self.hue_sign

    @property
    def noise_sigma(self) -> float:
        return 0.02 + 0.06 * self.strength

    @property
    def blur_radius(self) -> int:
        return int(round(2 * self.strength))


SPLIT_SHIFTS: dict[str, ShiftSpec] = {
    "source": ShiftSpec(0.0, 1),
    "val": ShiftSpec(0.35, 1),
    "targetA": ShiftSpec(0.5, -1),
    "targetB": ShiftSpec(0.7, 1),
    "targetC": ShiftSpec(0.9, -1),
}


def _jitter_color(rng: np.random.Generator, base: np.ndarray, amount: float) -> tuple[float, float, float]:
    c = np.clip(base + rng.uniform(-amount, amount, size=3), 0.0, 1.0)
    return (float(c[0]), float(c[1]), float(c[2]))


def _sample_shape(rng: np.random.Generator, cls: int, size: int) -> Shape:
    s = size / CANVAS
    if cls == 1:
        params = (rng.uniform(10, 54) * s, rng.uniform(10, 54) * s, rng.uniform(6, 14) * s)
    elif cls == 2:
        x0, y0 = rng.uniform(2, 44) * s, rng.uniform(2, 44) * s
        w, h = rng.uniform(10, 24) * s, rng.uniform(10, 24) * s
        params = (x0, y0, min(x0 + w, size - 1.0), min(y0 + h, size - 1.0))
    elif cls == 3:
        cx, cy = rng.uniform(14, 50) * s, rng.uniform(14, 50) * s
        radius = rng.uniform(9, 18) * s
        base = rng.uniform(0, 2 * math.pi)
        pts: list[float] = []
        for k in range(3):
            a = base + 2 * math.pi * k / 3 + rng.uniform(-0.4, 0.4)
            pts += [cx + radius * math.cos(a), cy + radius * math.sin(a)]
        params = tuple(pts)
    else:
        params = (rng.uniform(0, math.pi), rng.uniform(-20, 20) * s, rng.uniform(2.5, 5.0) * s)
    return Shape(cls=cls, params=tuple(float(p) for p in params), color=_jitter_color(rng, PALETTE[cls], 0.08))


def sample_scene(seed: int, size: int = CANVAS) -> SceneSpec:
    """Draw a scene description from the stream keyed by ``seed``."""
    rng = keyed_rng("scene", seed)
    n = int(rng.integers(2, 6))
    shapes = tuple(_sample_shape(rng, int(rng.integers(1, NUM_CLASSES)), size) for _ in range(n))
    return SceneSpec(seed=seed, shapes=shapes, background=_jitter_color(rng, PALETTE[0], 0.05), size=size)


# ============================================
# Rasterization
# ============================================

def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def shape_coverage(shape: Shape, size: int = CANVAS) -> np.ndarray:
    """Boolean H x W map of the pixels whose centers lie inside ``shape``."""
    px, py = _pixel_centers(size)
    p = shape.params
    if shape.cls == 1:
        cx, cy, r = p
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.cls == 2:
        x0, y0, x1, y1 = p
        return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    if shape.cls == 3:
        ax, ay, bx, by, cx, cy = p

        def side(x1: float, y1: float, x2: float, y2: float) -> np.ndarray:
            return (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)

        d1, d2, d3 = side(ax, ay, bx, by), side(bx, by, cx, cy), side(cx, cy, ax, ay)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(has_neg & has_pos)
    if shape.cls == 4:
        angle, offset, half_width = p
        center = size / 2.0
        dist = (px - center) * math.cos(angle) + (py - center) * math.sin(angle) - offset
        return np.abs(dist) <= half_width
    raise SadaValidationError(f"Unknown shape class {shape.cls}", parameter="cls", valid_values=[1, 2, 3, 4])


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``spec``: (3 x H x W float32 image in [0, 1], H x W uint8 mask).

    Shapes are painted in order; later shapes occlude earlier ones.
    """
    size = spec.size
    image = np.empty((3, size, size), dtype=np.float64)
    image[:] = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    mask = np.zeros((size, size), dtype=np.uint8)
    for shape in spec.shapes:
        cover = shape_coverage(shape, size)
        mask[cover] = shape.cls
        image[:, cover] = np.asarray(shape.color, dtype=np.float64)[:, None]
    if spec.noise > 0:
        image += keyed_rng("render", spec.seed).normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """3x3 RGB matrix rotating hue by ``degrees`` while keeping luminance."""
    t = math.radians(degrees)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(t), -math.sin(t)], [0.0, math.sin(t), math.cos(t)]])
    return _YIQ2RGB @ rot @ _RGB2YIQ


def rotate_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    m = hue_rotation_matrix(degrees)
    return np.einsum("ij,jhw->ihw", m, image.astype(np.float64))


def apply_shift(image: np.ndarray, shift: ShiftSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply hue rotation, contrast, brightness, box blur and noise, then clamp.

    ``shift.strength == 0`` returns an unchanged copy.
    """
    if shift.strength == 0.0:
        return np.array(image, dtype=np.float32, copy=True)
    rng = rng if rng is not None else keyed_rng("shift", 0)
    x = rotate_hue(image, shift.hue_degrees)
    x = (x - 0.5) * shift.contrast + 0.5 + shift.brightness
    if shift.blur_radius > 0:
        k = 2 * shift.blur_radius + 1
        x = ndimage.uniform_filter(x, size=(1, k, k), mode="nearest")
    x = x + rng.normal(0.0, shift.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# ============================================
# Datasets on disk
# ============================================

def sample_id(split: str, index: int) -> str:
    return f"{split}_{index:05d}"


def make_sample(split: str, index: int, seed: int, shift: Optional[ShiftSpec] = None) -> tuple[np.ndarray, np.ndarray]:
    """Image and mask of sample ``index`` of ``split`` (no I/O)."""
    scene_seed = child_seed("scene", split, index, seed)
    spec = sample_scene(scene_seed)
    image, mask = render_scene(spec)
    shift = shift if shift is not None else SPLIT_SHIFTS[split]
    image = apply_shift(image, shift, keyed_rng("shift", split, index, seed))
    if not (mask > 0).any():
        # unreachable with the shipped sampler ranges
        raise SadaDataError(f"Scene {sample_id(split, index)} has no foreground object")
    return image, mask


def generate(
    out: Union[str, Path],
    split: str,
    n: int,
    seed: int,
    shift: Optional[ShiftSpec] = None,
    jobs: int = 1,
) -> Path:
    """Write ``n`` samples of ``split`` under ``out`` and return the manifest path.

    Layout: ``out/images/<id>.sadt``, ``out/masks/<id>.sadt``,
    ``out/manifest.jsonl``. Output is a pure function of (split, n, seed,
    shift).
    """
    if split not in SPLITS:
        raise SadaValidationError(f"Unknown split '{split}'", parameter="split", valid_values=list(SPLITS))
    if n < 1:
        raise SadaValidationError(f"n must be >= 1, got {n}", parameter="n")
    if seed < 0:
        raise SadaValidationError(f"seed must be >= 0, got {seed}", parameter="seed")
    effective = shift if shift is not None else SPLIT_SHIFTS[split]
    out = Path(out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SadaDataError(f"Cannot create dataset directory {out}: {e}", path=str(out)) from e

    def write_one(index: int) -> ManifestEntry:
        sid = sample_id(split, index)
        image, mask = make_sample(split, index, seed, effective)
        sadt.save_tensor(out / "images" / f"{sid}.sadt", image)
        sadt.save_tensor(out / "masks" / f"{sid}.sadt", mask)
        return {
            "id": sid,
            "image": f"images/{sid}.sadt",
            "mask": f"masks/{sid}.sadt",
            "domain": split,
            "seed": seed,
            "shift": effective.strength,
        }

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(write_one, range(n)))
    else:
        entries = [write_one(i) for i in range(n)]

    manifest = out / MANIFEST_NAME
    try:
        with manifest.open("w", encoding="utf-8", newline="\n") as fh:
            for entry in entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    except OSError as e:
        raise SadaDataError(f"Cannot write manifest {manifest}: {e}", path=str(manifest)) from e
    logger.info(f"Generated {n} {split} samples (shift {effective.strength}) in {out}")
    return manifest


@dataclass
class Dataset:
    """A manifest and the directory its relative paths resolve against."""

    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    manifest: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def domains(self) -> set[str]:
        return {e["domain"] for e in self.entries}

    def path_of(self, entry: ManifestEntry, key: str) -> Path:
        return self.root / entry[key]  # type: ignore[literal-required]

    def load(self, entry: ManifestEntry, cache: Optional[LRUCache] = None) -> tuple[np.ndarray, np.ndarray]:
        """Decoded (image, mask) of ``entry``; arrays are shared and read-only."""
        cache = cache if cache is not None else get_cache()
        image_path, mask_path = self.path_of(entry, "image"), self.path_of(entry, "mask")
        key = f"{LRUCache.file_key(image_path)}|{LRUCache.file_key(mask_path)}"

        def loader() -> tuple[np.ndarray, np.ndarray]:
            image = sadt.load_tensor(image_path)
            mask = sadt.load_tensor(mask_path)
            if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.float32:
                raise SadaDataError(f"{image_path} is not a 3 x H x W float32 image", path=str(image_path))
            if mask.dtype != np.uint8 or mask.shape != image.shape[1:]:
                raise SadaDataError(f"{mask_path} does not match its image", path=str(mask_path))
            return image, mask

        return cache.get_or_load(key, loader)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset(self.root, [e for e in self.entries if e["id"] in wanted], self.manifest)

    def shuffled(self, seed: int) -> "Dataset":
        order = keyed_rng("shuffle", seed).permutation(len(self.entries))
        return Dataset(self.root, [self.entries[i] for i in order], self.manifest)


_REQUIRED = ("image", "mask", "domain", "seed")


def read_manifest(path: Union[str, Path]) -> Dataset:
    """Parse a manifest file (or a directory holding ``manifest.jsonl``)."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise SadaDataError(
            f"Cannot read manifest {manifest}: {e}",
            path=str(manifest),
            suggestion="Generate the split first with 'sada gen'",
        ) from e

    entries: list[ManifestEntry] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as e:
            raise SadaDataError(f"{manifest}:{lineno}: invalid JSON ({e.msg})", path=str(manifest)) from e
        missing = [k for k in _REQUIRED if k not in entry]
        if missing:
            raise SadaDataError(f"{manifest}:{lineno}: missing keys {missing}", path=str(manifest))
        entry.setdefault("id", Path(entry["image"]).stem)
        entries.append(entry)
    logger.debug(f"Read {len(entries)} entries from {manifest}")
    return Dataset(root=manifest.parent, entries=entries, manifest=manifest)
