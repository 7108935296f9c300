import sys
from functools import wraps
from pathlib import Path
from typing import Optional

import click
from rich import box
from rich.console import Console, RenderableType
from rich.panel import Panel
from rich.table import Table

from radner import __version__
from radner.core.pipeline import Pipeline, StageResult, load_run_config, resolve_run, run
from radner.core.registry import EconomyRegistry
from radner.exceptions import RadnerError
from radner.utils.io import write_report

console = Console()

# ============= Print Helpers =============

def status_panel(title: str, message: RenderableType, style: str = "cyan"):
    console.print(
        Panel(
            message,
            title=title,
            border_style=style,
            box=box.ROUNDED,
            padding=(1, 2),
        )
    )

def print_success(message: str):
    status_panel("SUCCESS", f"✅ {message}", "green")

def print_error(message: str):
    status_panel("ERROR", f"❌ {message}", "red")

def print_info(message: str):
    status_panel("INFO", f"💡 {message}", "blue")

def print_stage(result: StageResult):
    style = "green" if result.exit_code == 0 else "red"
    table = Table(box=None, show_header=False, padding=(0, 2))
    table.add_column(style="cyan", no_wrap=True)
    table.add_column()
    for key, value in result.summary.items():
        table.add_row(key, str(value))
    for path in result.files:
        table.add_row("file", f"[dim]{path}[/dim]")
    status_panel(f"{result.stage} · {result.verdict}", table, style)

# ============= Commands =============

def pipeline_options(fn):
    @click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path),
                  help="Run configuration (JSON).")
    @click.option("--out", "out_dir", default=None, help="Output directory (overrides the config).")
    @click.option("--seed", type=int, default=None, help="Random seed (overrides the config).")
    @click.option("--grid-scale", type=float, default=1.0, show_default=True,
                  help="Multiply grid node counts and time steps, for refinement studies.")
    @wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)
    return wrapper


def execute(command: str, config_path: Path, out_dir: Optional[str], seed: Optional[int],
            grid_scale: float, paths_csv: bool = False):
    try:
        config = load_run_config(config_path)
        resolved = resolve_run(config, base=config_path.parent, out=out_dir, seed=seed, grid_scale=grid_scale)
    except RadnerError as e:
        target = Path(out_dir or "out")
        write_report(target / "error.json", "config", e.to_report(), digest="", seed=seed or 0)
        print_error(e.message)
        sys.exit(1)

    print_info(f"Economy [bold]{resolved.economy.name}[/bold] (K={resolved.economy.K}, I={resolved.economy.I}), "
               f"seed {resolved.seed}, output {resolved.out_dir}")
    code, results = run(command, Pipeline(resolved), paths_csv=paths_csv, on_stage=print_stage)
    if code == 0:
        print_success(f"'{command}' finished")
    else:
        failed = results[-1]
        print_error(f"stage '{failed.stage}' ended with {failed.verdict}")
    sys.exit(code)


@click.group(name="radner")
@click.version_option(version=__version__)
def cli():
    """Compute and verify Radner equilibria of Markovian diffusion economies."""


@cli.command()
@pipeline_options
def validate(config_path, out_dir, seed, grid_scale):
    """Check the standing assumptions on the verification region."""
    execute("validate", config_path, out_dir, seed, grid_scale)


@cli.command("solve-ad")
@pipeline_options
def solve_ad(config_path, out_dir, seed, grid_scale):
    """Solve for the Arrow-Debreu equilibrium (Negishi weights)."""
    execute("solve-ad", config_path, out_dir, seed, grid_scale)


@cli.command()
@pipeline_options
def price(config_path, out_dir, seed, grid_scale):
    """Price every asset on the grid and cross-check by Monte Carlo."""
    execute("price", config_path, out_dir, seed, grid_scale)


@cli.command()
@pipeline_options
def completeness(config_path, out_dir, seed, grid_scale):
    """Report invertibility of the volatility matrix."""
    execute("completeness", config_path, out_dir, seed, grid_scale)


@cli.command()
@pipeline_options
@click.option("--paths-csv", is_flag=True, help="Also dump the simulated state paths.")
def radner(config_path, out_dir, seed, grid_scale, paths_csv):
    """Implement the allocation by trading and check budgets and clearing."""
    execute("radner", config_path, out_dir, seed, grid_scale, paths_csv)


@cli.command("all")
@pipeline_options
def run_all(config_path, out_dir, seed, grid_scale):
    """Run every stage in order."""
    execute("all", config_path, out_dir, seed, grid_scale)


@cli.command()
def catalog():
    """List the bundled benchmark economies."""
    registry = EconomyRegistry().load()
    table = Table(title="Catalog", box=box.ROUNDED, show_header=True, header_style="bold cyan")
    table.add_column("Name", style="green", no_wrap=True)
    table.add_column("Description", style="white")
    for name in registry.names():
        table.add_row(name, registry.economy_desc[name])
    console.print(table)


if __name__ == "__main__":
    cli()
