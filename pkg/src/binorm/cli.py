"""CLI commands for binorm."""

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from binorm import __version__
from binorm.checks import run_gradchecks
from binorm.config import (
    TRAIN_PRESETS,
    ModelConfig,
    RunConfig,
    TrainConfig,
    default_threads,
    load_model_config,
    load_train_config,
)
from binorm.data import ImageDataset, TokenDataset, parse_data_spec
from binorm.errors import BinormError, DataError
from binorm.log import setup_logging
from binorm.models import Model, build_model, count_params, memory_summary
from binorm.runtime import bench as run_bench
from binorm.runtime import export_packed, infer as run_infer, load_packed, pack_model
from binorm.train import JsonlWriter, evaluate, fit, load_checkpoint, save_checkpoint

app = typer.Typer(
    name="binorm",
    help="Train, export and run neural networks whose deployed parameters are single bits.",
    add_completion=False,
)

console = Console()
err_console = Console(stderr=True)

# Usage errors are raised from the click exceptions module typer ships with, vendored or not.
_usage_errors = sys.modules[typer.Exit.__module__]

CHECKPOINT_NAME = "checkpoint.npz"
MODEL_NAME = "model.bnm"
REPORT_NAME = "report.jsonl"


def version_callback(value: bool):
    if value:
        console.print(f"[bold cyan]binorm[/bold cyan] version {__version__}")
        raise typer.Exit()


@contextmanager
def reporting_errors():
    """Turn library errors into a one-line diagnostic and the error's exit code."""
    try:
        yield
    except BinormError as e:
        err_console.print(f"[bold red]✗[/bold red] {e}", highlight=False)
        raise typer.Exit(e.exit_code) from None


def emit_json(obj: dict) -> None:
    typer.echo(json.dumps(obj, sort_keys=True))


@app.callback()
def callback(
    version: bool = typer.Option(
        None,
        "--version",
        "-v",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit.",
    ),
):
    """Train, export and run neural networks whose deployed parameters are single bits."""
    with reporting_errors():
        setup_logging()


# ============================================================================
# Shared helpers
# ============================================================================


def _default_data(config: ModelConfig) -> str:
    """A synthetic dataset shaped for config."""
    if config.kind == "bcvnn":
        return (
            f"synthetic:images:classes={config.num_classes},n={128 * config.num_classes},"
            f"size={config.image_size},channels={config.input_channels}"
        )
    return f"synthetic:tokens:vocab={config.vocab_size},len={config.max_len + 1}"


def _train_config(source: Optional[str], model_source: str, config: ModelConfig) -> TrainConfig:
    if source is not None:
        return load_train_config(source)
    return load_train_config(model_source if model_source in TRAIN_PRESETS else config.kind)


def _load_any(path: Path) -> Model:
    """A float checkpoint, or the network of a packed model file."""
    if path.suffix == ".npz":
        return load_checkpoint(path)
    return load_packed(path).network


def _check_dataset(config: ModelConfig, dataset: ImageDataset | TokenDataset) -> None:
    if config.kind == "blm" and not isinstance(dataset, TokenDataset):
        raise DataError("a language model needs a token dataset")
    if config.kind == "bcvnn" and not isinstance(dataset, ImageDataset):
        raise DataError("an image classifier needs an image dataset")


def _metrics_table(title: str, rows: dict[str, str]) -> Panel:
    table = Table(show_header=False, box=None, padding=(0, 2))
    table.add_column("Key", style="dim")
    table.add_column("Value", style="bold")
    for key, value in rows.items():
        table.add_row(key, value)
    return Panel(table, title=f"[bold green]{title}[/bold green]", border_style="green")


# ============================================================================
# Training and evaluation
# ============================================================================


@app.command()
def train(
    config: str = typer.Option(..., "--config", "-c", help="Model preset name or JSON path"),
    seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Seed for initialization, shuffling and data"),
    data: Optional[str] = typer.Option(None, "--data", "-d", help="BND1 file or synthetic:SPEC"),
    train_config: Optional[str] = typer.Option(None, "--train-config", help="Training preset name or JSON path"),
    epochs: Optional[int] = typer.Option(None, "--epochs", "-e", help="Override the number of epochs"),
    batch: Optional[int] = typer.Option(None, "--batch", "-b", help="Override the batch size"),
    out: Path = typer.Option(Path("binorm-run"), "--out", "-o", help="Output directory"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", help="Validation threads (default BINORM_THREADS or 1)"),
    timing: bool = typer.Option(False, "--timing", help="Record wall time in the report"),
    as_json: bool = typer.Option(False, "--json", help="Stream the report as JSON lines"),
):
    """Train a model, writing a JSONL report, a float checkpoint and a packed export."""
    with reporting_errors():
        model_config = load_model_config(config)
        hyper = _train_config(train_config, config, model_config)
        run = RunConfig(command="train", model_config=config, data=data, train=hyper, seed=seed, out_dir=out)
        run.validate()

        hyper.seed = seed
        if epochs is not None:
            hyper.epochs = epochs
        if batch is not None:
            hyper.batch_size = batch
        hyper.threads = threads if threads is not None else default_threads()
        hyper.validate()

        dataset = parse_data_spec(data or _default_data(model_config), seed)
        _check_dataset(model_config, dataset)
        model = build_model(model_config, seed)

        out.mkdir(parents=True, exist_ok=True)
        if not as_json:
            console.print(
                Panel(
                    f"[bold]Model:[/bold]  {config} ({'binary' if model_config.binary else 'standard'})\n"
                    f"[bold]Data:[/bold]   {data or 'synthetic'} ({len(dataset)} examples)\n"
                    f"[bold]Epochs:[/bold] {hyper.epochs}, batch {hyper.batch_size}, {hyper.optimizer}\n"
                    f"[bold]Output:[/bold] {out}",
                    title="[cyan]Training[/cyan]",
                    border_style="cyan",
                )
            )

        with open(out / REPORT_NAME, "w") as report_file:
            writers = [JsonlWriter(report_file, timing)]
            if as_json:
                writers.append(JsonlWriter(sys.stdout, timing))

            def on_epoch(record, trained):
                for writer in writers:
                    writer.record(record)
                save_checkpoint(trained, out / CHECKPOINT_NAME)

            report = fit(model, dataset, hyper, on_epoch=on_epoch)
            for writer in writers:
                writer.write(report.summary())

        save_checkpoint(model, out / CHECKPOINT_NAME)
        written = export_packed(model, out / MODEL_NAME) if model_config.binary else None

    if as_json:
        return
    summary = {k: f"{v:.4f}" for k, v in report.summary().items() if v is not None}
    summary["checkpoint"] = str(out / CHECKPOINT_NAME)
    if written is not None:
        summary["packed model"] = f"{out / MODEL_NAME} ({written} bytes)"
    console.print(_metrics_table("Training finished", summary))


@app.command("eval")
def evaluate_command(
    model_path: Path = typer.Argument(..., help="Float checkpoint (.npz) or packed model (.bnm)"),
    data: Optional[str] = typer.Option(None, "--data", "-d", help="BND1 file or synthetic:SPEC"),
    seed: int = typer.Option(0, "--seed", "-s", help="Seed for synthetic data"),
    batch: int = typer.Option(64, "--batch", "-b", help="Batch size"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", help="Evaluation threads"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Loss, accuracy and perplexity of a model on a dataset."""
    with reporting_errors():
        RunConfig(command="eval", data=data).validate()
        if not model_path.is_file():
            raise DataError(f"Model file does not exist: {model_path}")
        model = _load_any(model_path)
        dataset = parse_data_spec(data or _default_data(model.config), seed)
        _check_dataset(model.config, dataset)
        result = evaluate(model, dataset, batch, threads if threads is not None else default_threads())

    if as_json:
        emit_json({"loss": result.loss, "accuracy": result.accuracy, "perplexity": result.perplexity})
        return
    console.print(
        _metrics_table(
            "Evaluation",
            {
                "Examples": str(len(dataset)),
                "Loss": f"{result.loss:.4f}",
                "Accuracy": f"{result.accuracy:.4f}",
                "Perplexity": f"{result.perplexity:.4f}",
            },
        )
    )


# ============================================================================
# Export and inference
# ============================================================================


@app.command()
def export(
    checkpoint: Path = typer.Argument(..., help="Float checkpoint (.npz)"),
    out: Path = typer.Option(Path("."), "--out", "-o", help="Output directory"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Quantize a float checkpoint and write it as a BNM1 model file."""
    with reporting_errors():
        model = load_checkpoint(checkpoint)
        target = out / MODEL_NAME
        written = export_packed(model, target)
        summary = memory_summary(model)

    if as_json:
        emit_json({"path": str(target), "bytes": written, "parameters": summary.parameters})
        return
    console.print(
        f"[bold green]✓[/bold green] Wrote [cyan]{target}[/cyan]: {written} bytes "
        f"for {summary.parameters:,} parameters ({summary.float_bytes / written:.1f}x smaller than float32)"
    )


@app.command()
def infer(
    model_path: Path = typer.Argument(..., help="Packed model (.bnm)"),
    input_path: str = typer.Argument(..., help="BND1 input file or synthetic:SPEC"),
    seed: int = typer.Option(0, "--seed", "-s", help="Seed for synthetic input"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", help="Inference threads"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Run a packed model on an input file and print distributions and argmax."""
    with reporting_errors():
        pm = load_packed(model_path)
        dataset = parse_data_spec(input_path, seed)
        _check_dataset(pm.config, dataset)
        result = run_infer(pm, dataset.inputs, threads=threads if threads is not None else default_threads())

    if as_json:
        emit_json({
            "probabilities": np.round(result.probabilities.astype(np.float64), 8).tolist(),
            "argmax": result.argmax.tolist(),
            "latency_ns": result.latency_ns,
        })
        return

    table = Table(show_header=True, header_style="bold cyan")
    table.add_column("#", style="dim")
    table.add_column("Argmax")
    table.add_column("Probability")
    for i, (top, probs) in enumerate(zip(result.argmax, result.probabilities)):
        table.add_row(str(i), str(int(top)), f"{probs[top]:.4f}")
    console.print(Panel(table, title="[bold green]Predictions[/bold green]", border_style="green"))
    console.print(f"[dim]{result.latency_ns / 1e6:.2f} ms for {len(result.argmax)} inputs[/dim]")


# ============================================================================
# Diagnostics
# ============================================================================


@app.command("count-params")
def count_params_command(
    config: str = typer.Option(..., "--config", "-c", help="Model preset name or JSON path"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Print per-layer and total parameter counts without allocating weights."""
    with reporting_errors():
        RunConfig(command="count-params", model_config=config).validate()
        model = build_model(load_model_config(config))
        counts = count_params(model)
        memory = memory_summary(model)

    if as_json:
        emit_json({
            "total": counts.total,
            "per_layer": counts.per_layer,
            "float_bytes": memory.float_bytes,
            "packed_bytes": memory.packed_bytes,
            "ratio": memory.ratio,
        })
        return

    table = Table(show_header=True, header_style="bold cyan")
    table.add_column("Layer")
    table.add_column("Parameters", justify="right")
    for name, count in counts.per_layer.items():
        table.add_row(name, f"{count:,}")
    table.add_row("[bold]total[/bold]", f"[bold]{counts.total:,}[/bold]")
    console.print(table)
    console.print(
        f"[dim]float32 {memory.float_bytes:,} bytes, packed {memory.packed_bytes:,} bytes "
        f"({memory.ratio:.1f}x)[/dim]"
    )


@app.command()
def gradcheck(
    seed: int = typer.Option(0, "--seed", "-s", help="Seed for the random test points"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Compare autograd gradients with central finite differences."""
    with reporting_errors():
        results = run_gradchecks(seed)

    failed = [r for r in results if not r.passed]
    if as_json:
        emit_json({r.name: r.error for r in results})
    else:
        table = Table(show_header=True, header_style="bold cyan")
        table.add_column("Check")
        table.add_column("Max relative error", justify="right")
        table.add_column("")
        for r in results:
            mark = "[green]✓[/green]" if r.passed else "[red]✗[/red]"
            table.add_row(r.name, f"{r.error:.2e}", mark)
        console.print(table)

    if failed:
        err_console.print(f"[bold red]✗[/bold red] {len(failed)} gradient checks failed")
        raise typer.Exit(3)


@app.command()
def bench(
    config: str = typer.Option(..., "--config", "-c", help="Model preset name or JSON path"),
    seed: int = typer.Option(0, "--seed", "-s", help="Initialization and input seed"),
    batch: int = typer.Option(8, "--batch", "-b", help="Inputs per forward pass"),
    repeats: int = typer.Option(3, "--repeats", "-r", help="Timed repetitions"),
    as_json: bool = typer.Option(False, "--json", help="Print JSON"),
):
    """Packed against float forward latency and peak memory."""
    with reporting_errors():
        RunConfig(command="bench", model_config=config).validate()
        model_config = load_model_config(config)
        if not model_config.binary:
            raise DataError("bench compares packed and float paths of a binary model")
        model = build_model(model_config, seed)
        pm = pack_model(model)
        rng = np.random.default_rng(seed)
        if model_config.kind == "blm":
            inputs = rng.integers(0, model_config.vocab_size, size=(batch, model_config.max_len))
        else:
            size = model_config.image_size
            inputs = rng.random((batch, size, size, model_config.input_channels), dtype=np.float32)
        result = run_bench(model, pm, inputs, repeats)

    if as_json:
        emit_json(vars(result))
        return
    console.print(
        _metrics_table(
            "Benchmark",
            {
                "Float forward": f"{result.float_ns / 1e6:.2f} ms",
                "Packed forward": f"{result.packed_ns / 1e6:.2f} ms",
                "Float peak": f"{result.float_peak_bytes:,} bytes",
                "Packed peak": f"{result.packed_peak_bytes:,} bytes",
                "Float parameters": f"{result.float_param_bytes:,} bytes",
                "Packed parameters": f"{result.packed_param_bytes:,} bytes",
            },
        )
    )


def main(argv: Optional[list[str]] = None) -> int:
    """Run one command and return its exit code (usage errors give 1)."""
    try:
        result = app(args=argv, standalone_mode=False, prog_name="binorm")
    except _usage_errors.ClickException as e:
        e.show()
        return 1
    except typer.Abort:
        return 1
    except BinormError as e:
        err_console.print(f"[bold red]✗[/bold red] {e}", highlight=False)
        return e.exit_code
    return result if isinstance(result, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
