import sys
from pathlib import Path
from typing import List, NoReturn, Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from normlab.config.settings import Settings, load_experiment_config, write_experiment_config
from normlab.core.rng import Rng
from normlab.errors import NormlabError, describe_error
from normlab.norms.constants import ConstantQuery, Scheme, mc_dispersion_ratio
from normlab.schema.results import Diagnostic, ExperimentResult
from normlab.train.dynamics import claim_problem, verify_direction_claim
from normlab.train.experiments import EXPERIMENTS, run_experiment
from normlab.train.trainer import Trainer, emit_csv
from normlab.utils.constants import CONSTANTS_CSV_HEADER, CSV_DECIMALS
from normlab.utils.logging import setup_logging
from normlab.utils.validation import validate_output_dir

try:
    # Load environment from .env if present
    from dotenv import load_dotenv  # type: ignore

    load_dotenv()
except Exception:
    # Optional dependency; safe to continue without .env loading
    pass

console = Console()
app = typer.Typer(
    help="normlab CLI - L^p batch normalization, bounded weight norm and weight-decay dynamics",
    add_completion=False,
    no_args_is_help=True,
)


@app.callback()
def _configure(
    ctx: typer.Context,
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR"),
    settings_file: Optional[Path] = typer.Option(None, "--settings", help="Settings JSON (default ./.normlab.json)"),
) -> None:
    settings = Settings.load(settings_file)
    if log_level:
        settings.log_level = log_level
    setup_logging(settings.log_level, Path(settings.log_file) if settings.log_file else None)
    ctx.obj = settings


def _fail(exc: BaseException) -> NoReturn:
    if isinstance(exc, (NormlabError, OSError)):
        payload = describe_error(exc)
        console.print(f"[red]{payload['code']}: {escape(payload['message'])}[/red]")
    else:
        console.print(f"[red]{escape(str(exc))}[/red]")
    raise typer.Exit(code=1)


def print_diagnostics(diagnostics: List[Diagnostic]) -> None:
    """Print diagnostics in a formatted table"""
    if not diagnostics:
        return

    table = Table(title="Diagnostics")
    table.add_column("Stage", style="cyan")
    table.add_column("Level", style="yellow")
    table.add_column("Arm", style="green")
    table.add_column("Message", style="white")
    table.add_column("Suggestion", style="blue")

    for d in diagnostics:
        level_style = "red" if d.severity == "error" else "yellow" if d.severity == "warning" else "green"
        table.add_row(
            d.stage,
            f"[{level_style}]{d.severity}[/{level_style}]",
            d.arm or "-",
            escape(d.message),
            escape(d.suggestion or "-"),
        )

    console.print(table)


def print_summary(result: ExperimentResult) -> None:
    table = Table(title=f"Experiment {result.name}")
    table.add_column("Arm", style="cyan")
    table.add_column("Final val acc", justify="right")
    table.add_column("Epochs", justify="right")
    table.add_column("Diverged")
    table.add_column("Flags", style="blue")

    for arm in result.arms:
        run = arm.result
        flags = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in arm.flags.items())
        table.add_row(
            arm.name,
            f"{run.final_val_acc:.4f}" if run else "-",
            str(len(run.epochs)) if run else "-",
            ("[red]yes[/red]" if run.diverged else "no") if run else "-",
            flags or "-",
        )
    console.print(table)


@app.command()
def train(
    config: Path = typer.Option(..., "--config", "-c", help="Experiment config file"),
    out: Path = typer.Option(Path("run.csv"), "--out", "-o", help="Per-epoch CSV output"),
    params: Optional[Path] = typer.Option(None, "--params", help="Write final parameters (.npz)"),
    trajectory: Optional[Path] = typer.Option(None, "--trajectory", help="Write the per-step norm trajectory CSV"),
) -> None:
    """Train one model and write its per-epoch CSV."""
    try:
        cfg = load_experiment_config(config)
        trainer = Trainer(cfg)
        with console.status("[cyan]Training...[/cyan]"):
            result = trainer.run()
        emit_csv(result, out)
        if trajectory is not None:
            trainer.recorder.store.write(trajectory)
        if params is not None:
            trainer.save_parameters(params)
    except (NormlabError, OSError) as e:
        _fail(e)

    console.print(f"[green]Wrote {len(result.epochs)} epochs to {out}[/green]")
    console.print(f"Final validation accuracy: {result.final_val_acc:.4f}")
    if result.diverged:
        try:
            result.raise_for_divergence()
        except NormlabError as e:
            _fail(e)


@app.command()
def experiment(
    ctx: typer.Context,
    name: str = typer.Argument(..., help=f"One of: {', '.join(EXPERIMENTS)}"),
    config: Path = typer.Option(..., "--config", "-c", help="Base experiment config file"),
    out: str = typer.Option(..., "--out", "-o", help="Output directory"),
    workers: Optional[int] = typer.Option(None, "--workers", "-j", min=1, help="Parallel arms"),
) -> None:
    """Run a multi-arm experiment and write one CSV per arm plus summary.csv."""
    settings: Settings = ctx.obj or Settings()
    if name not in EXPERIMENTS:
        console.print(f"[red]Unknown experiment '{name}'. Expected one of: {', '.join(EXPERIMENTS)}[/red]")
        raise typer.Exit(code=2)

    ok, error, out_dir = validate_output_dir(out)
    if not ok:
        console.print(f"[red]{escape(error)}[/red]")
        raise typer.Exit(code=2)

    try:
        cfg = load_experiment_config(config)
        write_experiment_config(cfg, out_dir / "config.ini")
        with console.status(f"[cyan]Running {name}...[/cyan]"):
            result = run_experiment(name, cfg, out_dir, workers or settings.workers)
    except (NormlabError, OSError) as e:
        _fail(e)

    print_summary(result)
    print_diagnostics(result.diagnostics + [d for arm in result.arms for d in arm.diagnostics])
    for path in result.files:
        console.print(f"[cyan]{path}[/cyan]")
    if result.has_errors():
        console.print("[red]Experiment finished with errors.[/red]")
        raise typer.Exit(code=1)


@app.command("verify-constants")
def verify_constants(
    ctx: typer.Context,
    scheme: Scheme = typer.Option(Scheme.L1, "--scheme", case_sensitive=False),
    n: int = typer.Option(256, "--n", help="Batch size"),
    k: Optional[int] = typer.Option(None, "--k", help="Top(k) count"),
    trials: Optional[int] = typer.Option(None, "--trials", help="Monte Carlo batches"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    center: bool = typer.Option(False, "--center", help="Subtract the batch mean instead of the true mean"),
    header: bool = typer.Option(True, "--header/--no-header"),
) -> None:
    """Print closed-form and Monte Carlo constants as a CSV row."""
    settings: Settings = ctx.obj or Settings()
    try:
        query = ConstantQuery(scheme, n, k)
        estimate = mc_dispersion_ratio(
            query,
            trials or settings.mc_trials,
            Rng(settings.mc_seed if seed is None else seed),
            center=center,
            workers=settings.workers,
        )
    except (NormlabError, ValueError) as e:
        _fail(e)

    if header:
        typer.echo(",".join(CONSTANTS_CSV_HEADER))
    fields = [
        query.scheme.value,
        str(query.n),
        "" if query.k is None else str(query.k),
        f"{query.closed_form:.{CSV_DECIMALS}f}",
        f"{estimate.value:.{CSV_DECIMALS}f}",
        f"{estimate.stderr:.{CSV_DECIMALS}f}",
    ]
    typer.echo(",".join(fields))


@app.command("verify-claim")
def verify_claim(
    eta: float = typer.Option(1e-3, "--eta", help="Learning rate"),
    seed: int = typer.Option(0, "--seed"),
    dim: int = typer.Option(32, "--dim", help="Parameter count (multiple of 4)"),
) -> None:
    """Check the first-order weight-direction update on a scale-invariant objective."""
    try:
        objective, w0 = claim_problem(seed, dim)
        report = verify_direction_claim(objective, w0, eta)
    except (NormlabError, ValueError) as e:
        _fail(e)

    table = Table(title=f"Direction update at eta={eta:g}")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in report.model_dump().items():
        table.add_row(key, f"{value:.6e}")
    console.print(table)


def main() -> None:
    app()


if __name__ == "__main__":
    sys.exit(main())
