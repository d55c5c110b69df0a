"""
Run configuration: adaptation hyperparameters, the source-training recipe,
and the ``key = value`` config-file format.

Precedence is defaults < config file < command-line flags. Every record and
aggregate carries :func:`config_hash` of the effective configuration.

Config file example::

    # validation-selected values
    alpha = 0.2
    psi = 0.7
    scales = 0.5, 1.0
    adapt_groups = block5, head
"""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .exceptions import SadaDataError, SadaValidationError
from .model import DEFAULT_ADAPT_GROUPS, DEFAULT_NUM_CLASSES, GROUP_NAMES
from .norm import SanConfig

logger = logging.getLogger(__name__)

DEFAULT_SCALES = (0.25, 0.5, 0.75, 1.0)

# Named layer-group presets for the runtime/accuracy trade-off
GROUP_PRESETS: dict[str, tuple[str, ...]] = {
    "head": ("head",),
    "block5+head": ("block5", "head"),
    "block4+block5+head": DEFAULT_ADAPT_GROUPS,
    "all": GROUP_NAMES,
}


def _check_range(name: str, value: float, lo: float, hi: float) -> None:
    if not lo <= value <= hi:
        raise SadaValidationError(f"{name} must lie in [{lo}, {hi}], got {value}", parameter=name)


def _check_interval(name: str, pair: tuple[float, float], lo: float, hi: float) -> None:
    if len(pair) != 2 or not lo <= pair[0] <= pair[1] <= hi:
        raise SadaValidationError(
            f"{name} must be an interval (a, b) with {lo} <= a <= b <= {hi}, got {pair}",
            parameter=name,
        )


def resolve_groups(spec: Union[str, tuple[str, ...], list[str]]) -> tuple[str, ...]:
    """Turn a preset name or a comma/plus separated group list into group names."""
    if isinstance(spec, str):
        if spec in GROUP_PRESETS:
            return GROUP_PRESETS[spec]
        parts = [p.strip() for p in spec.replace("+", ",").split(",") if p.strip()]
    else:
        parts = [str(p).strip() for p in spec]
    unknown = [p for p in parts if p not in GROUP_NAMES]
    if unknown or not parts:
        raise SadaValidationError(
            f"Invalid layer groups: {spec!r}",
            parameter="adapt_groups",
            valid_values=list(GROUP_NAMES) + list(GROUP_PRESETS),
        )
    return tuple(g for g in GROUP_NAMES if g in parts)


@dataclass(frozen=True)
class AdaptConfig:
    """Per-sample adaptation hyperparameters.

    Attributes:
        psi: Pseudo-label threshold factor in [0, 1]
        eta: Adaptation learning rate (> 0)
        n_iters: Number of adaptation iterations (>= 0)
        scales: View scales relative to the original resolution
        use_scales: When false only scale 1.0 is used
        use_flip: Add horizontally flipped views
        use_gray: Add grayscaled views
        adapt_groups: Layer groups whose parameters are updated
        alpha: SaN blend weight
        momentum_adapt: SGD momentum during adaptation
        loss_on_all_views: Apply the loss to every view (labels warped per view)
    """

    psi: float = 0.7
    eta: float = 0.05
    n_iters: int = 10
    scales: tuple[float, ...] = DEFAULT_SCALES
    use_scales: bool = True
    use_flip: bool = True
    use_gray: bool = True
    adapt_groups: tuple[str, ...] = DEFAULT_ADAPT_GROUPS
    alpha: float = 0.1
    momentum_adapt: float = 0.0
    loss_on_all_views: bool = False

    def __post_init__(self) -> None:
        _check_range("psi", self.psi, 0.0, 1.0)
        _check_range("alpha", self.alpha, 0.0, 1.0)
        if self.eta <= 0:
            raise SadaValidationError(f"eta must be positive, got {self.eta}", parameter="eta")
        if self.n_iters < 0:
            raise SadaValidationError(f"n_iters must be >= 0, got {self.n_iters}", parameter="n_iters")
        if not 0.0 <= self.momentum_adapt < 1.0:
            raise SadaValidationError(
                f"momentum_adapt must lie in [0, 1), got {self.momentum_adapt}",
                parameter="momentum_adapt",
            )
        scales = tuple(sorted(float(s) for s in self.scales))
        if not scales or any(s <= 0 for s in scales):
            raise SadaValidationError(f"scales must be positive, got {self.scales}", parameter="scales")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "adapt_groups", resolve_groups(self.adapt_groups))

    @property
    def norm(self) -> SanConfig:
        return SanConfig.san(self.alpha)

    @property
    def effective_scales(self) -> tuple[float, ...]:
        return self.scales if self.use_scales else (1.0,)

    def replace(self, **changes: Any) -> "AdaptConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainRecipe:
    """Source-training recipe.

    Photometric augmentation follows the usual segmentation recipe: random
    resized crops, flips, color jitter, Gaussian blur and grayscale.
    """

    epochs: int = 40
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    poly_power: float = 0.9
    num_classes: int = DEFAULT_NUM_CLASSES
    augment: bool = True
    crop_scale: tuple[float, float] = (0.08, 1.0)
    flip_p: float = 0.5
    jitter_p: float = 0.5
    jitter_range: tuple[float, float] = (0.7, 1.3)
    hue_range: tuple[float, float] = (0.9, 1.1)
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    gray_p: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise SadaValidationError(f"epochs must be >= 1, got {self.epochs}", parameter="epochs")
        if self.batch_size < 1:
            raise SadaValidationError(f"batch_size must be >= 1, got {self.batch_size}", parameter="batch_size")
        if self.base_lr <= 0:
            raise SadaValidationError(f"base_lr must be positive, got {self.base_lr}", parameter="base_lr")
        if self.weight_decay < 0:
            raise SadaValidationError(
                f"weight_decay must be >= 0, got {self.weight_decay}", parameter="weight_decay"
            )
        _check_range("momentum", self.momentum, 0.0, 0.999)
        for name in ("flip_p", "jitter_p", "blur_p", "gray_p"):
            _check_range(name, getattr(self, name), 0.0, 1.0)
        for name in ("crop_scale", "jitter_range", "hue_range", "blur_sigma"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        _check_interval("crop_scale", self.crop_scale, 1e-3, 1.0)
        _check_interval("jitter_range", self.jitter_range, 0.0, 10.0)
        _check_interval("hue_range", self.hue_range, 0.0, 2.0)
        _check_interval("blur_sigma", self.blur_sigma, 0.0, 10.0)

    def replace(self, **changes: Any) -> "TrainRecipe":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of one CLI run."""

    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    recipe: TrainRecipe = field(default_factory=TrainRecipe)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise SadaValidationError(f"jobs must be >= 1, got {self.jobs}", parameter="jobs")
        if self.seed < 0:
            raise SadaValidationError(f"seed must be >= 0, got {self.seed}", parameter="seed")

    def as_dict(self) -> dict[str, Any]:
        return {
            "adapt": _jsonable(dataclasses.asdict(self.adapt)),
            "recipe": _jsonable(dataclasses.asdict(self.recipe)),
            "seed": self.seed,
        }

    def hash(self, **extra: Any) -> str:
        """CRC32 of the canonical serialization; ``jobs`` never enters the hash."""
        return config_hash({**self.as_dict(), **extra})


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    return value


def canonical_json(data: Mapping[str, Any]) -> str:
    return json.dumps(_jsonable(dict(data)), sort_keys=True, separators=(",", ":"))


def config_hash(data: Mapping[str, Any]) -> str:
    """8 lowercase hex digits of zlib.crc32 over :func:`canonical_json`."""
    return f"{zlib.crc32(canonical_json(data).encode('utf-8')) & 0xFFFFFFFF:08x}"


# ============================================
# key = value files
# ============================================

_ADAPT_FIELDS = {f.name: f for f in dataclasses.fields(AdaptConfig)}
_RECIPE_FIELDS = {f.name: f for f in dataclasses.fields(TrainRecipe)}
_RUN_KEYS = ("seed", "jobs")
VALID_KEYS: tuple[str, ...] = tuple(sorted(set(_ADAPT_FIELDS) | set(_RECIPE_FIELDS) | set(_RUN_KEYS)))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _default_of(key: str) -> Any:
    if key in _ADAPT_FIELDS:
        return _ADAPT_FIELDS[key].default
    if key in _RECIPE_FIELDS:
        return _RECIPE_FIELDS[key].default
    return 0


def parse_value(key: str, raw: Any) -> Any:
    """Convert ``raw`` to the type of ``key``'s default value."""
    if key not in VALID_KEYS:
        raise SadaValidationError(f"Unknown config key '{key}'", parameter=key, valid_values=list(VALID_KEYS))
    if not isinstance(raw, str):
        return raw
    default = _default_of(key)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [p.strip() for p in text.split(",") if p.strip()]
            if key == "adapt_groups":
                return resolve_groups(text) if len(items) == 1 else tuple(items)
            return tuple(float(p) for p in items)
    except ValueError as e:
        raise SadaValidationError(
            f"Cannot parse value {raw!r} for '{key}' as {type(default).__name__}",
            parameter=key,
        ) from e
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SadaValidationError(
                f"{source}:{lineno}: expected 'key = value', got {line!r}",
                parameter="config",
            )
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in VALID_KEYS:
            raise SadaValidationError(
                f"{source}:{lineno}: unknown config key '{key}'",
                parameter=key,
                valid_values=list(VALID_KEYS),
            )
        values[key] = parse_value(key, raw)
    return values


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SadaDataError(f"Cannot read config file {path}: {e}", path=str(path)) from e
    return parse_config_text(text, source=str(path))


def build_run_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, an optional config file and flag overrides (``None`` = unset)."""
    values: dict[str, Any] = load_config_file(config_file) if config_file else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = parse_value(key, value)

    adapt = AdaptConfig(**{k: v for k, v in values.items() if k in _ADAPT_FIELDS})
    recipe = TrainRecipe(**{k: v for k, v in values.items() if k in _RECIPE_FIELDS})
    run = {k: values[k] for k in _RUN_KEYS if k in values}
    cfg = RunConfig(adapt=adapt, recipe=recipe, **run)
    logger.debug(f"effective config {canonical_json(cfg.as_dict())}")
    return cfg
