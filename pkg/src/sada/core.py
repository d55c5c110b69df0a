"""
Evaluation protocol for sada.

Runs a prediction method over a dataset and collects per-image records and a
dataset aggregate; sweeps, validation-split selection and the augmentation
ablation are built on top of :func:`evaluate_set`.

Methods:
    tbn      single forward, running (source) statistics
    pbn      single forward, per-image statistics
    san      single forward, statistics blended with weight alpha
    tta      multi-view averaging, no updates
    adapt    per-sample self-adaptation on pseudo labels
    entropy  per-sample entropy minimization
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from . import sadt
from .adapt import AdaptReport, adapt_one, entropy_adapt, predict_plain, tta_fused
from .config import AdaptConfig, config_hash, resolve_groups
from .exceptions import SadaContractError, SadaDataError, SadaError, SadaValidationError
from .metrics import CalibrationHistogram, ConfusionMatrix, confidence_and_prediction, ece, miou
from .model import ParamSnapshot, TinySegNet, snapshot_params
from .norm import SanConfig
from .synth import MANIFEST_NAME, Dataset
from .tensor import GuardCounter, guard_scope
from .types import METHODS, SWEEP_PARAMS, TARGET_SPLITS, AggregateReport, ImageRecord, ManifestEntry

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
PSI_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
ETA_GRID = (0.01, 0.025, 0.05, 0.1)

# Method each sweep parameter is evaluated with, unless overridden
SWEEP_METHOD = {"alpha": "san", "psi": "adapt", "eta": "adapt", "iters": "adapt", "groups": "adapt"}


def _validate_method(method: str) -> None:
    if method not in METHODS:
        raise SadaValidationError(
            f"Unknown method '{method}'",
            parameter="method",
            valid_values=list(METHODS),
        )


def _validate_jobs(jobs: int) -> None:
    if jobs < 1:
        raise SadaValidationError(f"jobs must be >= 1, got {jobs}", parameter="jobs")


def _manifest_domains(directory: Path, seen: dict[Path, set[str]]) -> set[str]:
    """Domains named by ``directory/manifest.jsonl``; unreadable lines are ignored."""
    if directory not in seen:
        domains: set[str] = set()
        manifest = directory / MANIFEST_NAME
        if manifest.is_file():
            try:
                lines = manifest.read_text(encoding="utf-8").splitlines()
            except OSError:
                lines = []
            for line in lines:
                try:
                    domain = json.loads(line).get("domain")
                except (json.JSONDecodeError, AttributeError):
                    continue
                if isinstance(domain, str):
                    domains.add(domain)
        seen[directory] = domains
    return seen[directory]


def _target_paths(dataset: Dataset) -> list[tuple[str, Path]]:
    """Entry files that live under a directory whose manifest is a target split."""
    seen: dict[Path, set[str]] = {}
    found = []
    for entry in dataset:
        for key in ("image", "mask"):
            path = dataset.path_of(entry, key).resolve()
            for parent in path.parents:
                if _manifest_domains(parent, seen) & set(TARGET_SPLITS):
                    found.append((entry["id"], parent))
                    break
    return found


def audit_split(dataset: Dataset, purpose: str) -> None:
    """Refuse held-out target data for model selection.

    Both the manifest's ``domain`` fields and the files its entries point at
    are checked: a path that resolves under a target split's directory is
    refused even when the entry claims another domain.

    Raises:
        SadaContractError: If any entry belongs to a target split
    """
    suggestion = "Run selection on the 'val' split and reuse the chosen values on targets"
    leaked = sorted(dataset.domains & set(TARGET_SPLITS))
    if leaked:
        raise SadaContractError(
            f"{purpose} must not read target data, manifest {dataset.manifest} contains {', '.join(leaked)}",
            parameter="data",
            suggestion=suggestion,
        )
    stray = _target_paths(dataset)
    if stray:
        sid, directory = stray[0]
        raise SadaContractError(
            f"{purpose} must not read target data, {sid} points into {directory} "
            f"({len(stray)} file(s) under target splits)",
            parameter="data",
            suggestion=suggestion,
        )


def _output_dir(path: Optional[Union[str, Path]]) -> Optional[Path]:
    if path is None:
        return None
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SadaDataError(f"Cannot create {path}: {e}", path=str(path)) from e
    return path


def eval_hash(cfg: AdaptConfig, method: str, seed: int = 0) -> str:
    return config_hash({"adapt": asdict(cfg), "method": method, "seed": seed})


def norm_for(method: str, cfg: AdaptConfig) -> SanConfig:
    if method == "tbn":
        return SanConfig.tbn()
    if method == "pbn":
        return SanConfig.pbn()
    return cfg.norm


# ============================================
# One image
# ============================================

def run_method(
    net: TinySegNet,
    image: np.ndarray,
    method: str,
    cfg: AdaptConfig,
    snapshot: Optional[ParamSnapshot] = None,
) -> AdaptReport:
    """Predict one image with ``method``; ``net`` is left unchanged."""
    _validate_method(method)
    start = time.perf_counter()
    if method == "adapt":
        return adapt_one(net, image, cfg, snapshot=snapshot)[1]
    if method == "entropy":
        return entropy_adapt(net, image, cfg, snapshot=snapshot)[1]

    counter = GuardCounter()
    with guard_scope(counter):
        if method == "tta":
            fused = tta_fused(net, image, cfg)
            probs = fused.probs.data
            report = AdaptReport(mask=np.argmax(probs, axis=0).astype(np.uint8), probs=probs, views=fused.view_count)
        else:
            mask, probs = predict_plain(net, image, norm_for(method, cfg))
            report = AdaptReport(mask=mask, probs=probs, views=1)
    report.guards = counter.as_dict()
    report.wall_ms = (time.perf_counter() - start) * 1000.0
    return report


def _nan_to_none(values: Iterable[float]) -> list[Optional[float]]:
    return [None if math.isnan(v) else float(v) for v in values]


@dataclass
class _ImageOutcome:
    record: ImageRecord
    cm: Optional[ConfusionMatrix] = None
    hist: Optional[CalibrationHistogram] = None


def _evaluate_one(
    net: TinySegNet,
    snapshot: ParamSnapshot,
    dataset: Dataset,
    entry: ManifestEntry,
    method: str,
    cfg: AdaptConfig,
    chash: str,
    dump_pseudo: Optional[Path],
    dump_masks: Optional[Path] = None,
) -> _ImageOutcome:
    sid = entry["id"]
    try:
        image, mask = dataset.load(entry)
    except SadaError as e:
        logger.warning(f"Skipping {sid}: {e.message}")
        return _ImageOutcome(record={"id": sid, "method": method, "error": e.message, "config_hash": chash})

    report = run_method(net, image, method, cfg, snapshot=snapshot)
    cm = ConfusionMatrix(net.num_classes).update(report.mask, mask)
    conf, pred = confidence_and_prediction(report.probs)
    hist = CalibrationHistogram().update(conf, pred, mask)
    per_class, mean = miou(cm)
    if dump_pseudo is not None and report.pseudo is not None:
        report.pseudo.save(dump_pseudo / f"{sid}.sadt")
    if dump_masks is not None:
        sadt.save_tensor(dump_masks / f"{sid}.sadt", report.mask)

    record: ImageRecord = {
        "id": sid,
        "method": method,
        "miou": mean,
        "per_class_iou": _nan_to_none(per_class),
        "ece": ece(hist),
        "coverage": report.coverage,
        "losses": report.losses,
        "wall_ms": report.wall_ms,
        "guards": report.guards,
        "skipped": report.skipped,
        "config_hash": chash,
    }
    logger.debug(f"{sid} {method}: miou={mean} ece={record['ece']}")
    return _ImageOutcome(record=record, cm=cm, hist=hist)


# ============================================
# Dataset evaluation
# ============================================

@dataclass
class EvalResult:
    """Per-image records (sorted by id) and the dataset aggregate."""

    records: list[ImageRecord] = field(default_factory=list)
    aggregate: Optional[AggregateReport] = None

    @property
    def mean_wall_ms(self) -> Optional[float]:
        times = [r["wall_ms"] for r in self.records if "wall_ms" in r]
        return float(np.mean(times)) if times else None


def evaluate_set(
    net: TinySegNet,
    dataset: Dataset,
    method: str,
    cfg: AdaptConfig,
    jobs: int = 1,
    chash: Optional[str] = None,
    dump_pseudo: Optional[Union[str, Path]] = None,
    dump_masks: Optional[Union[str, Path]] = None,
) -> EvalResult:
    """Evaluate ``method`` on every image of ``dataset``.

    Images are processed independently from the same parameters, so a
    record does not depend on which other images are evaluated or in what
    order. With ``jobs > 1`` each worker thread runs its own copy of the
    network. Unreadable samples become error records. ``dump_pseudo`` and
    ``dump_masks`` name directories for the final pseudo labels and the
    predicted masks, one ``<id>.sadt`` per image.
    """
    _validate_method(method)
    _validate_jobs(jobs)
    chash = chash or eval_hash(cfg, method)
    dump_dir = _output_dir(dump_pseudo)
    mask_dir = _output_dir(dump_masks)

    snapshot = snapshot_params(net)
    entries = list(dataset)
    if jobs == 1 or len(entries) <= 1:
        outcomes = [_evaluate_one(net, snapshot, dataset, e, method, cfg, chash, dump_dir, mask_dir) for e in entries]
    else:
        local = threading.local()

        def work(entry: ManifestEntry) -> _ImageOutcome:
            if not hasattr(local, "net"):
                local.net = net.clone()
            return _evaluate_one(local.net, snapshot, dataset, entry, method, cfg, chash, dump_dir, mask_dir)

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, entries))

    outcomes.sort(key=lambda o: o.record["id"])
    result = EvalResult(records=[o.record for o in outcomes])
    result.aggregate = aggregate(outcomes, method, net.num_classes, chash)
    logger.info(
        f"{method}: {result.aggregate['n_images']} images, "
        f"miou={result.aggregate['miou']}, ece={result.aggregate['ece']}"
    )
    return result


def aggregate(outcomes: Sequence[_ImageOutcome], method: str, num_classes: int, chash: str) -> AggregateReport:
    """Pool confusion matrices and histograms; wall time is left out."""
    cm = ConfusionMatrix(num_classes)
    hist = CalibrationHistogram()
    coverages: list[float] = []
    n_errors = 0
    for o in outcomes:
        if o.cm is None:
            n_errors += 1
            continue
        cm = cm.merge(o.cm)
        hist = hist.merge(o.hist)
        if o.record["coverage"]:
            coverages.append(o.record["coverage"][0])
    per_class, mean = miou(cm)
    return {
        "method": method,
        "miou": mean,
        "per_class": _nan_to_none(per_class),
        "ece": ece(hist),
        "n_images": len(outcomes) - n_errors,
        "n_errors": n_errors,
        "n_pixels": cm.total,
        "mean_coverage": math.fsum(coverages) / len(coverages) if coverages else None,
        "histogram": hist.to_dict(),
        "config_hash": chash,
    }


# ============================================
# Output files
# ============================================

def write_records(records: Iterable[ImageRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise SadaDataError(f"Cannot write {path}: {e}", path=str(path)) from e


def write_json(data: Any, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise SadaDataError(f"Cannot write {path}: {e}", path=str(path)) from e


def write_table(table: pd.DataFrame, out_dir: Union[str, Path], stem: str) -> tuple[Path, Path]:
    """Write ``table`` as ``<stem>.csv`` and ``<stem>.json`` (records orient)."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(csv_path, index=False)
    except OSError as e:
        raise SadaDataError(f"Cannot write {csv_path}: {e}", path=str(csv_path)) from e
    write_json(json.loads(table.to_json(orient="records")), json_path)
    return csv_path, json_path


# ============================================
# Sweeps, selection, ablation
# ============================================

def _with_param(cfg: AdaptConfig, param: str, value: Any) -> AdaptConfig:
    if param == "alpha":
        return cfg.replace(alpha=float(value))
    if param == "psi":
        return cfg.replace(psi=float(value))
    if param == "eta":
        return cfg.replace(eta=float(value))
    if param == "iters":
        return cfg.replace(n_iters=int(value))
    if param == "groups":
        return cfg.replace(adapt_groups=resolve_groups(value))
    raise SadaValidationError(f"Unknown sweep parameter '{param}'", parameter="param", valid_values=list(SWEEP_PARAMS))


def parse_grid(param: str, text: str) -> list[Any]:
    """Comma-separated grid; ``groups`` takes preset names, ``a:b:step`` expands ranges."""
    if param not in SWEEP_PARAMS:
        raise SadaValidationError(f"Unknown sweep parameter '{param}'", parameter="param", valid_values=list(SWEEP_PARAMS))
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise SadaValidationError("grid is empty", parameter="grid")
    if param == "groups":
        for item in items:
            resolve_groups(item)
        return items
    values: list[Any] = []
    try:
        for item in items:
            if ":" in item:
                lo, hi, step = (float(p) for p in item.split(":"))
                count = int(math.floor((hi - lo) / step + 1e-9)) + 1
                values.extend(round(lo + k * step, 10) for k in range(count))
            else:
                values.append(float(item))
    except ValueError as e:
        raise SadaValidationError(f"Cannot parse grid {text!r}", parameter="grid") from e
    if param == "iters":
        values = [int(v) for v in values]
    return values


def sweep(
    net: TinySegNet,
    dataset: Dataset,
    param: str,
    grid: Sequence[Any],
    cfg: AdaptConfig,
    method: Optional[str] = None,
    jobs: int = 1,
    seed: int = 0,
) -> pd.DataFrame:
    """One aggregate per grid point as a table.

    Columns: param, value, method, miou, ece, coverage (mean pseudo-label
    coverage of the first iteration), mean_wall_ms, n_images, config_hash.
    """
    audit_split(dataset, "sweep")
    method = method or SWEEP_METHOD.get(param, "adapt")
    rows = []
    for value in grid:
        point = _with_param(cfg, param, value)
        result = evaluate_set(net, dataset, method, point, jobs=jobs, chash=eval_hash(point, method, seed))
        agg = result.aggregate
        rows.append(
            {
                "param": param,
                "value": value,
                "method": method,
                "miou": agg["miou"],
                "ece": agg["ece"],
                "coverage": agg["mean_coverage"],
                "mean_wall_ms": result.mean_wall_ms,
                "n_images": agg["n_images"],
                "config_hash": agg["config_hash"],
            }
        )
        logger.info(f"sweep {param}={value}: miou={agg['miou']}")
    return pd.DataFrame(rows)


def best_value(table: pd.DataFrame) -> Any:
    """Grid value with the highest mIoU; ties go to the earliest (smallest) value."""
    scored = table.dropna(subset=["miou"])
    if scored.empty:
        raise SadaContractError("no grid point produced a defined mIoU", parameter="grid")
    return scored.loc[scored["miou"].idxmax(), "value"]


@dataclass
class Selection:
    """Values chosen on the validation split, frozen for target evaluation."""

    alpha: float
    psi: float
    eta: float
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "psi": self.psi,
            "eta": self.eta,
            "sweeps": {k: json.loads(t.to_json(orient="records")) for k, t in self.tables.items()},
        }

    def apply(self, cfg: AdaptConfig) -> AdaptConfig:
        return cfg.replace(alpha=self.alpha, psi=self.psi, eta=self.eta)


def select(
    net: TinySegNet,
    dataset: Dataset,
    cfg: AdaptConfig,
    tune_adapt: bool = True,
    alpha_grid: Sequence[float] = ALPHA_GRID,
    psi_grid: Sequence[float] = PSI_GRID,
    eta_grid: Sequence[float] = ETA_GRID,
    jobs: int = 1,
    seed: int = 0,
) -> Selection:
    """Pick alpha (method san), then psi and eta (method adapt) by validation mIoU."""
    audit_split(dataset, "select")
    tables = {"alpha": sweep(net, dataset, "alpha", sorted(alpha_grid), cfg, method="san", jobs=jobs, seed=seed)}
    alpha = float(best_value(tables["alpha"]))
    cfg = cfg.replace(alpha=alpha)
    psi, eta = cfg.psi, cfg.eta
    if tune_adapt:
        tables["psi"] = sweep(net, dataset, "psi", sorted(psi_grid), cfg, method="adapt", jobs=jobs, seed=seed)
        psi = float(best_value(tables["psi"]))
        cfg = cfg.replace(psi=psi)
        tables["eta"] = sweep(net, dataset, "eta", sorted(eta_grid), cfg, method="adapt", jobs=jobs, seed=seed)
        eta = float(best_value(tables["eta"]))
    logger.info(f"selected alpha={alpha} psi={psi} eta={eta}")
    return Selection(alpha=alpha, psi=psi, eta=eta, tables=tables)


def load_selection(path: Union[str, Path]) -> dict[str, float]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise SadaDataError(f"Cannot read {path}: {e}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise SadaDataError(f"{path} is not valid JSON: {e.msg}", path=str(path)) from e
    missing = [k for k in ("alpha", "psi", "eta") if k not in data]
    if missing:
        raise SadaDataError(f"{path} lacks {missing}", path=str(path))
    return {k: float(data[k]) for k in ("alpha", "psi", "eta")}


# (use_scales, use_flip, use_gray); the all-off row is the no-augmentation baseline
ABLATION_ROWS: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def ablate(
    net: TinySegNet,
    dataset: Dataset,
    cfg: AdaptConfig,
    methods: Sequence[str] = ("tta", "adapt"),
    jobs: int = 1,
    seed: int = 0,
) -> pd.DataFrame:
    """mIoU and mean wall time for every combination of scales / flip / gray."""
    rows = []
    for method in methods:
        _validate_method(method)
        for use_scales, use_flip, use_gray in ABLATION_ROWS:
            point = cfg.replace(use_scales=use_scales, use_flip=use_flip, use_gray=use_gray)
            result = evaluate_set(net, dataset, method, point, jobs=jobs, chash=eval_hash(point, method, seed))
            rows.append(
                {
                    "method": method,
                    "scales": use_scales,
                    "flip": use_flip,
                    "gray": use_gray,
                    "miou": result.aggregate["miou"],
                    "ece": result.aggregate["ece"],
                    "mean_wall_ms": result.mean_wall_ms,
                }
            )
    return pd.DataFrame(rows)


__all__ = [
    "ALPHA_GRID",
    "EvalResult",
    "Selection",
    "ablate",
    "audit_split",
    "best_value",
    "eval_hash",
    "evaluate_set",
    "load_selection",
    "parse_grid",
    "run_method",
    "select",
    "sweep",
    "write_json",
    "write_records",
    "write_table",
]
