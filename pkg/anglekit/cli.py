"""
Command-line surface. Every command builds a workspace from the run config and
routes through `handle_operation`, which times the call, prints the JSON
result and maps failures to exit codes: 0 success, 1 invalid input or config,
2 runtime failure.
"""
import json
import logging
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.markdown import Markdown

from anglekit.data_pipeline import Task
from anglekit.settings import AngleKitSettings, configure_logging, load_run_config, update_config
from anglekit.workspace import AngleKitWorkspace

logger = logging.getLogger('anglekit_cli')

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

OPERATIONS = {
    "synth": "Generate the seeded synthetic AS-OCT stand-in set",
    "prepare": "Validate a manifest, record the train/test split and cache resized halves",
    "train-cls": "Train the angle-closure classifier",
    "train-loc": "Train stage 1 or stage 2 of the scleral-spur localizer",
    "predict": "Score and localize every half of a fold",
    "eval": "Evaluate predictions against ground truth and write report tables",
    "report": "Merge eval results from several runs into one report",
}

app = typer.Typer(name="anglekit", help="AS-OCT angle-closure classification and scleral-spur localization.",
                  no_args_is_help=True, add_completion=False)
console = Console()

ConfigOpt = typer.Option(None, "--config", help="Run config file of section.key=value lines")
SetOpt = typer.Option(None, "--set", help="Override one config key, e.g. --set train.epochs=5")
SeedOpt = typer.Option(None, "--seed", help="Seed for every random draw in the run")
WorkersOpt = typer.Option(None, "--workers", min=0, help="Worker threads/processes (overrides train.workers)")
OutOpt = typer.Option(Path("runs/latest"), "--out", help="Run directory")
LogLevelOpt = typer.Option(None, "--log-level", help="Override ANGLEKIT_LOG_LEVEL")
ManifestOpt = typer.Option(None, "--manifest", help="Annotation CSV (overrides data.manifest)")


def build_workspace(config: Optional[Path], overrides: Optional[List[str]], seed: Optional[int],
                    workers: Optional[int], out: Path, extra: Optional[Dict[str, Any]] = None) -> AngleKitWorkspace:
    cfg = load_run_config(config, overrides or ())
    values: Dict[str, Any] = dict(extra or {})
    if seed is not None:
        values.update({"train.seed": seed, "synth.seed": seed, "data.split_seed": seed})
    if workers is not None:
        values["train.workers"] = workers
    cfg = update_config(cfg, {k: v for k, v in values.items() if v is not None})
    return AngleKitWorkspace(cfg, out, AngleKitSettings(), cfg.train.workers)


def handle_operation(name: str, arguments: Dict[str, Any], run: Callable[[AngleKitWorkspace], Dict[str, Any]],
                     echo: Callable[[str], None] = typer.echo) -> int:
    """
    Build the workspace from `arguments`, run one operation and report it.

    Returns:
        The process exit code
    """
    start_time = time.time()
    workspace = None
    try:
        workspace = build_workspace(**arguments)
        result = run(workspace)
        execution_time = time.time() - start_time
        result_str = json.dumps(result, indent=2, default=str)
        echo(f"{name} (execution time: {execution_time:.2f}s):\n{result_str}")
        return EXIT_OK
    except (ValidationError, ValueError, click.BadParameter) as e:
        execution_time = time.time() - start_time
        logger.error(f"Error executing {name}: {str(e)} (execution time: {execution_time:.2f}s)")
        return EXIT_INVALID
    except Exception as e:
        execution_time = time.time() - start_time
        logger.error(f"Error executing {name}: {str(e)} (execution time: {execution_time:.2f}s)", exc_info=True)
        return EXIT_RUNTIME
    finally:
        if workspace is not None:
            workspace.cleanup()


def _finish(code: int) -> None:
    raise typer.Exit(code)


def _common(config, set_, seed, workers, out, log_level, **extra) -> Dict[str, Any]:
    configure_logging(log_level)
    return {"config": config, "overrides": set_, "seed": seed, "workers": workers, "out": out, "extra": extra}


@app.command("synth", help=OPERATIONS["synth"])
def synth(count: Optional[int] = typer.Option(None, "--count", min=1, help="Number of images"),
          size: Optional[str] = typer.Option(None, "--size", help="Image size as H,W"),
          config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
          workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    args = _common(config, set_, seed, workers, out, log_level, **{"synth.count": count, "synth.size": size})
    _finish(handle_operation("synth", args, lambda ws: ws.synthesize()))


@app.command("prepare", help=OPERATIONS["prepare"])
def prepare(manifest: Optional[Path] = ManifestOpt,
            config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
            workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    args = _common(config, set_, seed, workers, out, log_level, **{"data.manifest": manifest})
    _finish(handle_operation("prepare", args, lambda ws: ws.prepare()))


@app.command("train-cls", help=OPERATIONS["train-cls"])
def train_cls(manifest: Optional[Path] = ManifestOpt,
              resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
              config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
              workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    args = _common(config, set_, seed, workers, out, log_level,
                   **{"data.manifest": manifest, "train.task": Task.classification.value})
    _finish(handle_operation("train-cls", args, lambda ws: ws.train_cls(resume)))


@app.command("train-loc", help=OPERATIONS["train-loc"])
def train_loc(stage: int = typer.Option(..., "--stage", min=1, max=2, help="1 = coarse, 2 = fine"),
              coarse: Optional[Path] = typer.Option(None, "--coarse", help="Stage-1 checkpoint for stage-2 crops"),
              manifest: Optional[Path] = ManifestOpt,
              resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
              config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
              workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    task = Task.localization_stage1 if stage == 1 else Task.localization_stage2
    args = _common(config, set_, seed, workers, out, log_level,
                   **{"data.manifest": manifest, "train.task": task.value})
    _finish(handle_operation("train-loc", args, lambda ws: ws.train_loc(stage, coarse, resume)))


@app.command("predict", help=OPERATIONS["predict"])
def predict(cls: Optional[Path] = typer.Option(None, "--cls", help="Classifier checkpoint"),
            coarse: Optional[Path] = typer.Option(None, "--coarse", help="Stage-1 localizer checkpoint"),
            fine: Optional[Path] = typer.Option(None, "--fine", help="Stage-2 localizer checkpoint"),
            fold: str = typer.Option("test", "--fold", click_type=click.Choice(["train", "test", "all"])),
            overlays: bool = typer.Option(False, "--overlays", help="Write heatmap and overlay PNGs"),
            manifest: Optional[Path] = ManifestOpt,
            config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
            workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    args = _common(config, set_, seed, workers, out, log_level, **{"data.manifest": manifest})
    _finish(handle_operation("predict", args, lambda ws: ws.predict(cls, coarse, fine, fold, overlays)))


@app.command("eval", help=OPERATIONS["eval"])
def evaluate(pred: Path = typer.Option(..., "--pred", help="predictions.csv"),
             gt: Optional[Path] = typer.Option(None, "--gt", help="Ground-truth manifest"),
             task: str = typer.Option("both", "--task",
                                      click_type=click.Choice(["classification", "localization", "both"])),
             threshold: Optional[float] = typer.Option(None, "--threshold", min=0.0, max=1.0),
             config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
             workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    args = _common(config, set_, seed, workers, out, log_level)
    _finish(handle_operation("eval", args, lambda ws: ws.evaluate(pred, gt, task, threshold)))


@app.command("report", help=OPERATIONS["report"])
def report(evals: List[Path] = typer.Option(..., "--eval", help="eval.json from a run (repeatable)"),
           config: Optional[Path] = ConfigOpt, set_: Optional[List[str]] = SetOpt, seed: Optional[int] = SeedOpt,
           workers: Optional[int] = WorkersOpt, out: Path = OutOpt, log_level: Optional[str] = LogLevelOpt) -> None:
    def _run(ws: AngleKitWorkspace) -> Dict[str, Any]:
        result = ws.report(evals)
        console.print(Markdown(result.pop("markdown")))
        return result
    args = _common(config, set_, seed, workers, out, log_level)
    _finish(handle_operation("report", args, _run))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Invoke the CLI without exiting the interpreter; returns the exit code."""
    try:
        rv = app(args=list(argv) if argv is not None else None, prog_name="anglekit", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    return rv if isinstance(rv, int) else EXIT_OK
