"""
CLI for sada.

Usage:
    sada gen --out data/source --split source --n 200 --seed 0
    sada train --data data/source --out runs/net.sack --epochs 40
    sada select --ckpt runs/net.sack --data data/val --out runs/select
    sada eval --ckpt runs/net.sack --data data/targetB --method adapt --selected runs/select/selected.json --out runs/adapt_B
    sada sweep --ckpt runs/net.sack --data data/val --param psi --grid 0,0.5,1 --out runs/psi
    sada ablate --ckpt runs/net.sack --data data/val --out runs/ablation

Log verbosity comes from SADA_LOG (error, info, debug).
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Optional

try:
    import typer
    from rich.console import Console
    from rich.logging import RichHandler
    from rich.table import Table
except ImportError:
    raise ImportError("CLI dependencies not installed. Run: pip install sada[cli]")

from . import core
from .config import RunConfig, build_run_config
from .exceptions import SadaDataError, SadaError, SadaValidationError
from .model import TinySegNet, load_checkpoint, save_checkpoint
from .synth import SPLIT_SHIFTS, ShiftSpec, generate, read_manifest
from .train import train_source
from .types import METHODS, SPLITS, SWEEP_PARAMS

app = typer.Typer(help="sada - self-adaptive inference for semantic segmentation")
console = Console()
err_console = Console(stderr=True)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

logger = logging.getLogger("sada")


def configure_logging() -> None:
    """Attach a RichHandler to the ``sada`` logger, level from SADA_LOG."""
    raw = os.environ.get("SADA_LOG", "info").strip().lower()
    level = LOG_LEVELS.get(raw)
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    logger.addHandler(RichHandler(console=err_console, show_path=False))
    logger.setLevel(level if level is not None else logging.INFO)
    logger.propagate = False
    if level is None:
        logger.warning(f"Unknown SADA_LOG value {raw!r}, using 'info'")


@app.callback()
def _setup() -> None:
    configure_logging()


def _run(fn: Callable[[], Any]) -> Any:
    """Call ``fn`` and turn library errors into exit codes."""
    try:
        return fn()
    except SadaError as e:
        err_console.print(f"[red]Error:[/red] {e.message}")
        if e.suggestion:
            err_console.print(f"[dim]Suggestion: {e.suggestion}[/dim]")
        raise typer.Exit(code=e.exit_code)
    except OSError as e:
        err_console.print(f"[red]I/O error:[/red] {e}")
        raise typer.Exit(code=SadaDataError.exit_code)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _run_config(config: Optional[Path], **overrides: Any) -> RunConfig:
    return build_run_config(config_file=config, overrides=overrides)


# ============================================
# gen / train
# ============================================

@app.command()
def gen(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    split: str = typer.Option(..., "--split", "-s", help=f"Split: {', '.join(SPLITS)}"),
    n: int = typer.Option(..., "--n", "-n", help="Number of samples"),
    seed: int = typer.Option(0, "--seed", help="Generator seed"),
    shift: Optional[float] = typer.Option(None, "--shift", help="Override the split's shift strength in [0, 1]"),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Worker threads"),
):
    """Generate a synthetic split (images, masks, manifest)."""

    def work() -> Path:
        spec = None
        if shift is not None:
            spec = ShiftSpec(strength=shift, hue_sign=SPLIT_SHIFTS.get(split, ShiftSpec()).hue_sign)
        with console.status(f"[bold green]Generating {n} {split} samples..."):
            return generate(out, split, n, seed, shift=spec, jobs=jobs)

    manifest = _run(work)
    console.print(f"[green]✓[/green] Wrote {n} samples, manifest {manifest}")


@app.command()
def train(
    data: Path = typer.Option(..., "--data", "-d", help="Source split directory or manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Checkpoint path (.sack)"),
    epochs: Optional[int] = typer.Option(None, "--epochs", "-e", help="Training epochs"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for init, order and augmentation"),
    lr: Optional[float] = typer.Option(None, "--lr", help="Base learning rate"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", "-b", help="Images per step"),
    momentum: Optional[float] = typer.Option(None, "--momentum", help="SGD momentum"),
    weight_decay: Optional[float] = typer.Option(None, "--weight-decay", help="L2 weight decay"),
    augment: Optional[bool] = typer.Option(None, "--augment/--no-augment", help="Photometric augmentation"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key = value config file"),
):
    """Train the source network and write a checkpoint plus a training log."""

    def work() -> tuple[TinySegNet, Path, str]:
        cfg = _run_config(
            config,
            epochs=epochs,
            seed=seed,
            base_lr=lr,
            batch_size=batch_size,
            momentum=momentum,
            weight_decay=weight_decay,
            augment=augment,
        )
        chash = cfg.hash(command="train")
        dataset = read_manifest(data)
        net = TinySegNet(num_classes=cfg.recipe.num_classes, seed=cfg.seed)
        log_path = out.parent / f"{out.stem}_train_log.jsonl"
        rows: list[dict[str, Any]] = []
        with console.status("[bold green]Training...") as status:

            def on_step(row: dict[str, Any]) -> None:
                rows.append({**row, "config_hash": chash})
                status.update(f"[bold green]Training... epoch {row['epoch'] + 1} step {row['step']} loss {row['loss']:.4f}")

            try:
                train_source(net, dataset, cfg.recipe, seed=cfg.seed, on_step=on_step)
            finally:
                core.write_records(rows, log_path)
        net.meta["config_hash"] = chash
        save_checkpoint(net, out)
        return net, log_path, chash

    net, log_path, chash = _run(work)
    console.print(f"[green]✓[/green] Checkpoint {out} (config {chash}), log {log_path}")


# ============================================
# eval / sweep / select / ablate
# ============================================

def _print_aggregate(agg: dict[str, Any], mean_wall_ms: Optional[float]) -> None:
    table = Table(title=f"{agg['method']} ({agg['n_images']} images)")
    table.add_column("Metric", style="bold")
    table.add_column("Value", justify="right")
    table.add_row("mIoU", _fmt(agg["miou"]))
    table.add_row("ECE", _fmt(agg["ece"]))
    table.add_row("coverage", _fmt(agg["mean_coverage"]))
    table.add_row("wall ms / image", _fmt(mean_wall_ms, 1))
    table.add_row("errors", str(agg["n_errors"]))
    table.add_row("config", agg["config_hash"])
    for c, iou in enumerate(agg["per_class"]):
        table.add_row(f"IoU class {c}", _fmt(iou))
    console.print(table)


def _print_frame(title: str, frame: Any) -> None:
    table = Table(title=title)
    for col in frame.columns:
        table.add_column(str(col), justify="right" if col not in ("param", "method") else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    console.print(table)


@app.command("eval")
def eval_cmd(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint (.sack)"),
    data: Path = typer.Option(..., "--data", "-d", help="Split directory or manifest"),
    method: str = typer.Option("adapt", "--method", "-m", help=f"Method: {', '.join(METHODS)}"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Directory for metrics.jsonl and aggregate.json"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="SaN prior weight"),
    psi: Optional[float] = typer.Option(None, "--psi", help="Pseudo-label threshold ratio"),
    eta: Optional[float] = typer.Option(None, "--eta", help="Adaptation learning rate"),
    iters: Optional[int] = typer.Option(None, "--iters", help="Adaptation iterations"),
    groups: Optional[str] = typer.Option(None, "--groups", help="Adapted layer groups or preset"),
    selected: Optional[Path] = typer.Option(None, "--selected", help="selected.json from 'sada select'"),
    dump_pseudo: Optional[Path] = typer.Option(None, "--dump-pseudo", help="Write final pseudo labels here"),
    dump_masks: Optional[Path] = typer.Option(None, "--dump-masks", help="Write predicted masks here"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Worker threads"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Run seed"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key = value config file"),
    json_output: bool = typer.Option(False, "--json", help="Print the aggregate as JSON"),
):
    """Evaluate one method on a split."""
    if method not in METHODS:
        err_console.print(f"[red]Error:[/red] unknown method '{method}' (choose from {', '.join(METHODS)})")
        raise typer.Exit(code=2)

    def work() -> core.EvalResult:
        frozen = core.load_selection(selected) if selected else {}
        flags = {"alpha": alpha, "psi": psi, "eta": eta}
        overrides = {k: flags[k] if flags[k] is not None else frozen.get(k) for k in flags}
        cfg = _run_config(config, n_iters=iters, adapt_groups=groups, jobs=jobs, seed=seed, **overrides)
        chash = cfg.hash(method=method)
        net = load_checkpoint(ckpt)
        dataset = read_manifest(data)
        with console.status(f"[bold green]Evaluating {method} on {len(dataset)} images..."):
            result = core.evaluate_set(
                net,
                dataset,
                method,
                cfg.adapt,
                jobs=cfg.jobs,
                chash=chash,
                dump_pseudo=dump_pseudo,
                dump_masks=dump_masks,
            )
        if out is not None:
            core.write_records(result.records, out / "metrics.jsonl")
            core.write_json(result.aggregate, out / "aggregate.json")
        return result

    result = _run(work)
    if json_output:
        console.print(json.dumps(result.aggregate, sort_keys=True, indent=2))
    else:
        _print_aggregate(result.aggregate, result.mean_wall_ms)
    if out is not None:
        console.print(f"[green]✓[/green] Wrote {out / 'metrics.jsonl'} and {out / 'aggregate.json'}")


@app.command()
def sweep(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint (.sack)"),
    data: Path = typer.Option(..., "--data", "-d", help="Validation split directory or manifest"),
    param: str = typer.Option(..., "--param", "-p", help=f"Parameter: {', '.join(SWEEP_PARAMS)}"),
    grid: str = typer.Option(..., "--grid", "-g", help="Comma-separated values or lo:hi:step"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="Method (default depends on --param)"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="SaN prior weight"),
    psi: Optional[float] = typer.Option(None, "--psi", help="Pseudo-label threshold ratio"),
    eta: Optional[float] = typer.Option(None, "--eta", help="Adaptation learning rate"),
    iters: Optional[int] = typer.Option(None, "--iters", help="Adaptation iterations"),
    groups: Optional[str] = typer.Option(None, "--groups", help="Adapted layer groups or preset"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Worker threads"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key = value config file"),
):
    """Evaluate a grid of one hyperparameter on the validation split."""

    def work() -> Any:
        if method is not None and method not in METHODS:
            raise SadaValidationError(f"Unknown method '{method}'", parameter="method", valid_values=list(METHODS))
        values = core.parse_grid(param, grid)
        cfg = _run_config(config, alpha=alpha, psi=psi, eta=eta, n_iters=iters, adapt_groups=groups, jobs=jobs)
        dataset = read_manifest(data)
        core.audit_split(dataset, "sweep")
        net = load_checkpoint(ckpt)
        with console.status(f"[bold green]Sweeping {param} over {len(values)} values..."):
            frame = core.sweep(net, dataset, param, values, cfg.adapt, method=method, jobs=cfg.jobs, seed=cfg.seed)
        return frame, core.write_table(frame, out, f"sweep_{param}")

    frame, paths = _run(work)
    _print_frame(f"Sweep over {param}", frame.drop(columns=["config_hash"]))
    console.print(f"[green]✓[/green] Wrote {paths[0]} and {paths[1]}")


@app.command()
def select(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint (.sack)"),
    data: Path = typer.Option(..., "--data", "-d", help="Validation split directory or manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory for selected.json"),
    tune_adapt: bool = typer.Option(True, "--tune-adapt/--alpha-only", help="Also select psi and eta"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Worker threads"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key = value config file"),
):
    """Choose alpha (then psi, eta) on the validation split and freeze them."""

    def work() -> tuple[core.Selection, Path]:
        cfg = _run_config(config, jobs=jobs)
        dataset = read_manifest(data)
        core.audit_split(dataset, "select")
        net = load_checkpoint(ckpt)
        with console.status("[bold green]Selecting hyperparameters on the validation split..."):
            selection = core.select(net, dataset, cfg.adapt, tune_adapt=tune_adapt, jobs=cfg.jobs, seed=cfg.seed)
        payload = {**selection.to_dict(), "config_hash": cfg.hash(command="select"), "data": str(dataset.manifest)}
        path = out / "selected.json"
        core.write_json(payload, path)
        for name, frame in selection.tables.items():
            core.write_table(frame, out, f"sweep_{name}")
        return selection, path

    selection, path = _run(work)
    console.print(f"alpha={selection.alpha}  psi={selection.psi}  eta={selection.eta}")
    console.print(f"[green]✓[/green] Wrote {path}")


@app.command()
def ablate(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint (.sack)"),
    data: Path = typer.Option(..., "--data", "-d", help="Split directory or manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    methods: str = typer.Option("tta,adapt", "--methods", help="Comma-separated methods"),
    selected: Optional[Path] = typer.Option(None, "--selected", help="selected.json from 'sada select'"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Worker threads"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key = value config file"),
):
    """mIoU and runtime of every scales / flip / gray combination."""

    def work() -> Any:
        frozen = core.load_selection(selected) if selected else {}
        cfg = _run_config(config, jobs=jobs, **frozen)
        names = [m.strip() for m in methods.split(",") if m.strip()]
        dataset = read_manifest(data)
        net = load_checkpoint(ckpt)
        with console.status("[bold green]Running the augmentation ablation..."):
            frame = core.ablate(net, dataset, cfg.adapt, methods=names, jobs=cfg.jobs, seed=cfg.seed)
        frame["config_hash"] = cfg.hash(command="ablate")
        return frame, core.write_table(frame, out, "ablation")

    frame, paths = _run(work)
    _print_frame("Augmentation ablation", frame.drop(columns=["config_hash"]))
    console.print(f"[green]✓[/green] Wrote {paths[0]} and {paths[1]}")


def main():
    """Entry point for CLI."""
    app()


if __name__ == "__main__":
    main()
