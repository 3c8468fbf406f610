"""Command-line interface: synthesize, corrupt, refine, evaluate, report."""

import json
import logging
from dataclasses import replace
from pathlib import Path

import click

from cinj import QueueConfigError
from config import BOX_REFINEMENT_MODES, LABEL_REFINEMENT_MODES, ConfigError, ConfigManager
from core_types import DatasetError, InvalidBoxError, load_dataset, save_dataset
from metrics import EvaluationError, evaluate_dataset, render_table
from noise_injector import (
    BoxResampleError,
    NoiseSpecError,
    compose_corruptions,
    load_record,
    parse_box_noise,
    parse_label_noise,
    save_record,
)
from refine_pipeline import run
from sim_detector import ORACLE_PRESETS, OracleConfigError
from synthetic import make_synthetic_dataset
from utils import setup_logging

logger = logging.getLogger(__name__)

DOMAIN_ERRORS = (
    ConfigError,
    DatasetError,
    EvaluationError,
    InvalidBoxError,
    NoiseSpecError,
    BoxResampleError,
    OracleConfigError,
    QueueConfigError,
    OSError,
)


def _noise_option(parser):
    def callback(ctx, param, value):
        if value is None:
            return None
        try:
            return parser(value)
        except NoiseSpecError as e:
            raise click.BadParameter(str(e)) from e

    return callback


def _write_json(data: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--debug", is_flag=True, help="Verbose log format with file:line.")
@click.option("--log-file", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def cli(ctx: click.Context, log_level: str, debug: bool, log_file: str | None) -> None:
    """Inject annotation noise, refine it, and measure the result."""
    setup_logging("DEBUG" if debug else log_level, debug, log_file)
    explicit = (
        ctx.get_parameter_source("log_level") == click.core.ParameterSource.COMMANDLINE or debug
    )
    ctx.obj = {"log_file": log_file, "explicit_logging": explicit}


@cli.command()
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--images", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--objects-per-image", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--classes", default=20, show_default=True, type=click.IntRange(min=2))
@click.option("--width", default=640.0, show_default=True, type=click.FloatRange(min=1.0))
@click.option("--height", default=480.0, show_default=True, type=click.FloatRange(min=1.0))
@click.option("--seed", required=True, type=click.IntRange(min=0))
def synthesize(out_path, images, objects_per_image, classes, width, height, seed):
    """Write a clean synthetic dataset."""
    try:
        ds = make_synthetic_dataset(images, objects_per_image, classes, (width, height), seed)
        save_dataset(ds, out_path)
    except (ValueError, *DOMAIN_ERRORS) as e:
        raise click.ClickException(str(e)) from e
    click.echo(f"Wrote {ds.object_count()} objects to {out_path}")


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--label-noise", callback=_noise_option(parse_label_noise),
              help="symmetric:R or pair:R")
@click.option("--box-noise", callback=_noise_option(parse_box_noise),
              help="uniform:N_BBOX or gaussian:SIGMA")
@click.option("--seed", required=True, type=click.IntRange(min=0))
@click.option("--record", "record_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Where to write the corruption record.")
@click.option("--timestamp", default=None, help="Stored verbatim in noise_meta.")
def corrupt(in_path, out_path, label_noise, box_noise, seed, record_path, timestamp):
    """Inject label and/or box noise into a clean dataset."""
    if label_noise is None and box_noise is None:
        raise click.UsageError("Give --label-noise, --box-noise, or both")
    try:
        clean = load_dataset(in_path)
        noisy, record = compose_corruptions(clean, label_noise, box_noise, seed)
        if timestamp is not None:
            noisy = replace(noisy, noise_meta=dict(noisy.noise_meta, timestamp=timestamp))
        save_dataset(noisy, out_path)
        if record_path:
            save_record(record, record_path)
    except DOMAIN_ERRORS as e:
        raise click.ClickException(str(e)) from e
    click.echo(
        f"{len(record.label_flips())} labels flipped, {len(record.box_changes())} boxes "
        f"perturbed; wrote {out_path}"
    )


@cli.command()
@click.option("--noisy", "noisy_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--clean", "clean_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--record", "record_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=click.IntRange(min=0), help="Required here or in the config file.")
@click.option("--epochs", type=int)
@click.option("--warm-up-epochs", type=int)
@click.option("--alpha", type=float)
@click.option("--acceptance-rate", type=float)
@click.option("--queue-length", type=int)
@click.option("--t-cm", type=float)
@click.option("--t-refine", type=float)
@click.option("--gamma", type=float)
@click.option("--oracle", multiple=True, type=click.Choice(sorted(ORACLE_PRESETS)),
              help="Oracle preset per epoch; repeat for a schedule.")
@click.option("--threads", type=int)
@click.option("--label-refinement", type=click.Choice(LABEL_REFINEMENT_MODES))
@click.option("--box-refinement", type=click.Choice(BOX_REFINEMENT_MODES))
@click.option("--carry-annotations/--no-carry-annotations", default=None)
@click.option("--outcomes-csv/--no-outcomes-csv", default=None, help="Also write outcomes.csv.")
@click.pass_context
def refine(ctx, noisy_path, clean_path, record_path, config_path, out_dir, seed, epochs,
           warm_up_epochs, alpha, acceptance_rate, queue_length, t_cm, t_refine, gamma,
           oracle, threads, label_refinement, box_refinement, carry_annotations, outcomes_csv):
    """Run warm-up and refinement epochs over a noisy dataset."""
    try:
        manager = ConfigManager(config_path)
        manager.load_config()
        manager.apply_overrides(
            seed=seed,
            epochs=epochs,
            warm_up_epochs=warm_up_epochs,
            alpha=alpha,
            acceptance_rate=acceptance_rate,
            queue_length=queue_length,
            t_cm=t_cm,
            t_refine=t_refine,
            gamma=gamma,
            oracle_schedule=list(oracle) or None,
            threads=threads,
            label_refinement=label_refinement,
            box_refinement=box_refinement,
            carry_annotations=carry_annotations,
            write_outcome_csv=outcomes_csv,
        )
        cfg = manager.validated()
        if config_path and not ctx.obj.get("explicit_logging"):
            # logging settings from the config file apply unless given on the command line
            setup_logging(cfg.log_level, cfg.debug_mode, ctx.obj.get("log_file"))
        report = run(clean_path, noisy_path, record_path, cfg, out_dir, log_callback=click.echo)
    except DOMAIN_ERRORS as e:
        raise click.ClickException(str(e)) from e

    if report.evaluation_available:
        click.echo(render_table([report.to_dict()]), nl=False)
    else:
        click.echo(f"Evaluation unavailable: {report.unavailable_reason}")


@cli.command()
@click.option("--refined", "refined_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--clean", "clean_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--record", "record_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Write the metrics JSON here instead of stdout.")
@click.option("--iou", default=0.7, show_default=True, type=click.FloatRange(0.0, 1.0, max_open=True))
def evaluate(refined_path, clean_path, record_path, out_path, iou):
    """Compare a refined (or noisy) dataset with the clean one."""
    try:
        refined = load_dataset(refined_path)
        clean = load_dataset(clean_path)
        record = load_record(record_path) if record_path else None
        result = evaluate_dataset(refined, clean, record, iou).to_dict()
    except DOMAIN_ERRORS as e:
        raise click.ClickException(str(e)) from e

    if out_path:
        _write_json(result, out_path)
        click.echo(f"Metrics written to {out_path}")
    else:
        click.echo(json.dumps(result, indent=2))


@cli.command()
@click.argument("reports", nargs=-1, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--format", "fmt", default="text", show_default=True, type=click.Choice(["text", "csv"]))
def report(reports, fmt):
    """Tabulate one or more run reports, one column per run."""
    try:
        loaded = []
        for path in reports:
            with open(path) as f:
                loaded.append(json.load(f))
        click.echo(render_table(loaded, fmt), nl=False)
    except json.JSONDecodeError as e:
        raise click.ClickException(f"Cannot parse report: {e}") from e
    except DOMAIN_ERRORS as e:
        raise click.ClickException(str(e)) from e


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
