import sys
from pathlib import Path
from typing import List, Optional

import orjson
import typer
from loguru import logger
from rich.console import Console

from api.v1.pipeline.domain import PipelineDomain
from api.v1.pipeline.repository import PipelineRepository
from api.v1.pipeline.schema import StageResponse
from core.config import load_run_config, settings
from core.exceptions import ConfigError, PlumeseekError, UsageError
from core.logging import configure_logging

app = typer.Typer(help="Locate and quantify point sources of a trace gas from airborne surveys.", no_args_is_help=True)
console = Console()

ConfigOption = typer.Option(None, "--config", help="Flat dotted key=value configuration file.")
SetOption = typer.Option([], "--set", help="Override one key, e.g. --set sampler.iterations=2000. Repeatable.")
SeedOption = typer.Option(None, "--seed", help="Random seed, overrides the configuration.")
OutOption = typer.Option(..., "--out", help="Run directory holding every artifact of the pipeline.")
SurveyOption = typer.Option(None, "--survey", help="Survey CSV; defaults to survey.csv in the run directory.")


def _fail(stage: str, record: dict, out: Optional[Path], code: int) -> None:
    record = {"error": record.get("error"), "message": record.get("message"), "stage": stage, "line": record.get("line")}
    sys.stderr.write(orjson.dumps(record).decode() + "\n")
    PipelineRepository().write_error(record, out)
    raise typer.Exit(code)


def _run(stage: str, out: Path, config_path: Optional[Path], overrides: List[str], seed: Optional[int], action) -> None:
    configure_logging(settings.LOG_LEVEL, settings.LOG_FILE)
    try:
        config = load_run_config(config_path, overrides, seed)
        response: StageResponse = action(config)
    except (UsageError, ConfigError) as e:
        logger.error(f"{stage}: {e}")
        _fail(stage, e.record(), out, 2)
    except PlumeseekError as e:
        logger.exception(f"{stage} failed")
        _fail(stage, e.record(), out, 1)
    except Exception as e:
        logger.exception(f"{stage} failed")
        _fail(stage, {"error": type(e).__name__, "message": str(e)}, out, 1)
    console.print(f"[green]{stage}[/green] wrote {len(response.artifacts)} artifacts to {response.out_dir}")


@app.command()
def simulate(
    out: Path = OutOption,
    config: Optional[Path] = ConfigOption,
    overrides: List[str] = SetOption,
    seed: Optional[int] = SeedOption,
):
    """Generate a synthetic survey and its ground truth."""
    _run("simulate", out, config, overrides, seed, lambda cfg: PipelineDomain().run_simulate(cfg, out))


@app.command()
def optimize(
    out: Path = OutOption,
    config: Optional[Path] = ConfigOption,
    overrides: List[str] = SetOption,
    seed: Optional[int] = SeedOption,
    survey: Optional[Path] = SurveyOption,
):
    """Fit the sparse gridded estimate and the background."""
    _run(
        "optimize", out, config, overrides, seed,
        lambda cfg: PipelineDomain().run_optimize(cfg, out, str(survey) if survey else None),
    )


@app.command()
def infer(
    out: Path = OutOption,
    config: Optional[Path] = ConfigOption,
    overrides: List[str] = SetOption,
    seed: Optional[int] = SeedOption,
    survey: Optional[Path] = SurveyOption,
    chains: int = typer.Option(1, "--chains", min=1, help="Independent chains; more than one run in parallel."),
    init: Optional[Path] = typer.Option(None, "--init", help="Source CSV used instead of optimize output."),
):
    """Sample the posterior over source sets."""
    _run(
        "infer", out, config, overrides, seed,
        lambda cfg: PipelineDomain().run_infer(
            cfg, out, str(survey) if survey else None, str(init) if init else None, chains
        ),
    )


@app.command()
def report(
    out: Path = OutOption,
    config: Optional[Path] = ConfigOption,
    overrides: List[str] = SetOption,
    seed: Optional[int] = SeedOption,
    survey: Optional[Path] = SurveyOption,
    render: bool = typer.Option(False, "--render", help="Also write PNG figures."),
):
    """Summarise the trace into maps, bands, acceptance rates and a score."""
    _run(
        "report", out, config, overrides, seed,
        lambda cfg: PipelineDomain().run_report(
            cfg, out, str(survey) if survey else None, render, settings.RENDER_DPI
        ),
    )


@app.command("config")
def show_config(
    config: Optional[Path] = ConfigOption,
    overrides: List[str] = SetOption,
    seed: Optional[int] = SeedOption,
):
    """Print every dotted key with its value."""
    try:
        values = load_run_config(config, overrides, seed).flat()
    except ConfigError as e:
        sys.stderr.write(orjson.dumps(dict(e.record(), stage="config")).decode() + "\n")
        raise typer.Exit(2)
    for key, value in values.items():
        typer.echo(f"{key} = {'none' if value is None else value}")


if __name__ == "__main__":
    app()
