"""
Command-line interface for the intertwined EEG toolkit
"""
import functools
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click

from intertwined import __version__
from intertwined import config as settings
from intertwined.utils.architectures import HyperConfig, Model, build_model, plan_shapes
from intertwined.utils.artifacts import MANIFEST_FILENAME, RunManifest, default_manifest_path
from intertwined.utils.data import (
    ChannelStatistics,
    apply_standardization,
    bandpass_dataset,
    channel_statistics,
    import_delimited,
    load_dataset,
    save_dataset,
    split,
    standardize,
    synth_generate,
)
from intertwined.utils.errors import ConfigurationError, DataError, IntertwinedError, NumericalError
from intertwined.utils.space import FAMILIES, SearchSpace
from intertwined.utils.stats import AccuracyTable, friedman_test, pairwise_bonferroni, rank_comparisons
from intertwined.utils.sweep import SweepSpec, run_sweep, sensitivity_curves, sensitivity_summary
from intertwined.utils.training import DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, evaluate, fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

STANDARDIZATION_FILENAME = "standardization.json"


def common_options(func):
    """--json, --seed and --manifest for every subcommand."""
    @click.option("--json", "as_json", is_flag=True, help="Print machine-readable JSON at full precision.")
    @click.option("--seed", type=int, default=None, help="Seed for every stochastic step (default 0).")
    @click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None,
                  help="Where to write the run manifest.")
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)
    return wrapper


def _progress(ctx: click.Context) -> bool:
    obj = ctx.find_root().obj or {}
    return bool(obj.get("progress", settings["PROGRESS"]))


@contextmanager
def recording(ctx: click.Context, command: List[str], seed: Optional[int], output: Optional[str] = None):
    """Yield a RunManifest and write it once the command finishes or fails."""
    params = dict(ctx.params)
    manifest = RunManifest(command, params, seed)
    if params.get("manifest_path"):
        path = Path(params["manifest_path"])
    elif output:
        path = Path(output) / MANIFEST_FILENAME
    else:
        path = default_manifest_path(settings["DATA_DIR"], command)
    try:
        yield manifest
        manifest.finish("success")
    except Exception as e:
        manifest.finish("failed", f"{type(e).__name__}: {e}")
        raise
    finally:
        manifest.write(path)


def emit(payload: Dict, as_json: bool, lines: Sequence[str]) -> None:
    if as_json:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            click.echo(line)


def _load_config(path: str) -> HyperConfig:
    config = HyperConfig.load(path)
    return config.validate(None if config.custom else SearchSpace())


@click.group()
@click.version_option(__version__, prog_name="intertwined-eeg")
@click.option("--quiet", is_flag=True, help="Hide progress bars.")
@click.pass_context
def cli(ctx, quiet):
    """Intertwined tdFC/sdC networks for motor-imagery EEG."""
    ctx.ensure_object(dict)
    ctx.obj["progress"] = settings["PROGRESS"] and not quiet


@cli.command()
@click.option("--n-per-class", type=int, default=100, show_default=True)
@click.option("--noise-std", type=float, default=0.5, show_default=True)
@click.option("--subjects", type=int, default=1, show_default=True)
@click.option("--output", type=click.Path(file_okay=False), required=True)
@common_options
@click.pass_context
def synth(ctx, n_per_class, noise_std, subjects, output, as_json, seed, manifest_path):
    """Generate a synthetic six-class EEG-like dataset."""
    seed = 0 if seed is None else seed
    with recording(ctx, ["synth"], seed, output) as manifest:
        dataset = synth_generate(n_per_class, seed, noise_std, n_subjects=subjects)
        manifest_file = save_dataset(dataset, output)
        manifest.add_artifact(manifest_file)
        manifest.add_artifact(Path(output) / "trials.f32")
        emit({"manifest": str(manifest_file), "trials": len(dataset)}, as_json,
             [f"Wrote {len(dataset)} synthetic trials to {manifest_file}"])


@cli.command()
@click.argument("dataset_manifest", type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), required=True)
@click.option("--low", type=float, default=8.0, show_default=True, help="Lower cutoff in Hz.")
@click.option("--high", type=float, default=30.0, show_default=True, help="Upper cutoff in Hz.")
@click.option("--bandpass/--no-bandpass", default=True, show_default=True)
@click.option("--standardize/--no-standardize", "use_standardization", default=False, show_default=True,
              help="Standardize with statistics of the whole dataset.")
@common_options
@click.pass_context
def preprocess(ctx, dataset_manifest, output, low, high, bandpass, use_standardization, as_json, seed,
               manifest_path):
    """Bandpass (and optionally standardize) a dataset."""
    with recording(ctx, ["preprocess"], seed, output) as manifest:
        dataset = load_dataset(dataset_manifest)
        if bandpass:
            dataset = bandpass_dataset(dataset, low, high)
        if use_standardization:
            dataset = standardize(dataset)
        manifest_file = save_dataset(dataset, output)
        manifest.add_artifact(manifest_file)
        emit({"manifest": str(manifest_file), "trials": len(dataset), "provenance": dataset.provenance}, as_json,
             [f"Preprocessed {len(dataset)} trials into {manifest_file}"])


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.argument("dataset_manifest", type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), required=True)
@click.option("--epochs", type=int, default=DEFAULT_EPOCHS, show_default=True)
@click.option("--batch-size", type=int, default=DEFAULT_BATCH_SIZE, show_default=True)
@click.option("--lr", type=float, default=None, help="Learning rate (default 0.001).")
@click.option("--val-fraction", type=float, default=0.2, show_default=True)
@click.option("--standardize/--no-standardize", "use_standardization", default=True, show_default=True,
              help="Standardize with training-split statistics.")
@common_options
@click.pass_context
def train(ctx, config_path, dataset_manifest, output, epochs, batch_size, lr, val_fraction, use_standardization,
          as_json, seed, manifest_path):
    """Train one config and write its TrainRecord, loss curve and model."""
    seed = 0 if seed is None else seed
    out = Path(output)
    with recording(ctx, ["train"], seed, output) as manifest:
        config = _load_config(config_path)
        train_set, val_set = split(load_dataset(dataset_manifest), val_fraction, seed)
        stats = None
        if use_standardization:
            stats = channel_statistics(train_set)
            train_set = apply_standardization(train_set, stats)
            val_set = apply_standardization(val_set, stats)

        model = build_model(config, seed, train_set.shape)
        record = fit(model, train_set, val_set, epochs=epochs, batch_size=batch_size, seed=seed, lr=lr,
                     progress=_progress(ctx))

        out.mkdir(parents=True, exist_ok=True)
        paths = [record.write(out / "train_record.jsonl"), record.write_loss_curve(out / "loss_curve.csv"),
                 model.save(out / "model")]
        if stats is not None:
            stats.save(out / "model" / STANDARDIZATION_FILENAME)
        for path in paths:
            manifest.add_artifact(path)

        summary = record.summary()
        emit(summary, as_json, [
            f"Config {summary['config_hash']} ({config.family}), {summary['epochs']} epochs",
            f"Best epoch {summary['best_epoch']}: val loss {summary['best_val_loss']}, "
            f"val accuracy {summary['best_val_accuracy']}",
        ])


@cli.command()
@click.argument("sweep_config", type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), required=True)
@click.option("--jobs", type=int, default=None, help="Concurrent trials (default from the sweep config, then INTERTWINED_JOBS).")
@click.option("--standardize/--no-standardize", "use_standardization", default=True, show_default=True)
@common_options
@click.pass_context
def sweep(ctx, sweep_config, output, jobs, use_standardization, as_json, seed, manifest_path):
    """Run a hyperparameter sweep described by a JSON sweep config."""
    spec = SweepSpec.load(sweep_config)
    seed = spec.seed if seed is None else seed
    out = Path(output)
    with recording(ctx, ["sweep"], seed, output) as manifest:
        if spec.family not in FAMILIES:
            raise ConfigurationError(f"Unknown family {spec.family!r}")
        if not spec.manifest:
            raise ConfigurationError("Sweep config names no dataset manifest")
        train_set, val_set = split(load_dataset(spec.manifest), spec.val_fraction, seed)
        if use_standardization:
            stats = channel_statistics(train_set)
            train_set, val_set = apply_standardization(train_set, stats), apply_standardization(val_set, stats)

        out.mkdir(parents=True, exist_ok=True)
        results_path = out / "sweep_results.jsonl"
        result = run_sweep(spec.search_space(), spec.family, spec.budget, (train_set, val_set), seed,
                           epochs=spec.epochs, batch_size=spec.batch_size, jobs=jobs or spec.jobs,
                           results_path=results_path, lr=spec.lr, grid=spec.grid, progress=_progress(ctx))
        manifest.add_artifact(results_path)

        best = result.best
        if best is not None:
            best_path = HyperConfig.from_dict(best.config).save(out / "best_config.json")
            manifest.add_artifact(best_path)
            for parameter in ("minimizer", "fc_activation"):
                table_path = out / f"sensitivity_{parameter}.csv"
                sensitivity_summary(result, parameter).to_csv(table_path)
                manifest.add_artifact(table_path)
                curves_path = out / f"sensitivity_curves_{parameter}.csv"
                sensitivity_curves(result, parameter).to_csv(curves_path)
                manifest.add_artifact(curves_path)

        summary = result.summary()
        emit(summary, as_json, [
            f"{summary['completed']} of {spec.budget} {spec.family} trials completed ({summary['failed']} failed)",
            f"Best trial {summary['best_index']} ({summary['best_config_hash']}): "
            f"val loss {summary['best_val_loss']}, val accuracy {summary['best_val_accuracy']}",
        ])


@cli.command("evaluate")
@click.argument("model_dir", type=click.Path(file_okay=False))
@click.argument("dataset_manifest", type=click.Path(dir_okay=False))
@common_options
@click.pass_context
def evaluate_command(ctx, model_dir, dataset_manifest, as_json, seed, manifest_path):
    """Score a saved model on a dataset."""
    with recording(ctx, ["evaluate"], seed) as manifest:
        model = Model.load(model_dir)
        dataset = load_dataset(dataset_manifest)
        stats_path = Path(model_dir) / STANDARDIZATION_FILENAME
        if stats_path.exists():
            dataset = apply_standardization(dataset, ChannelStatistics.load(stats_path))
        loss, accuracy = evaluate(model, dataset)
        emit({"loss": loss, "accuracy": accuracy, "trials": len(dataset)}, as_json,
             [f"Accuracy {accuracy:.4f} (loss {loss:.4f}) on {len(dataset)} trials"])


@cli.group()
def stats():
    """Compare model families on a subjects × families accuracy table."""


@stats.command()
@click.argument("table_path", type=click.Path(dir_okay=False))
@common_options
@click.pass_context
def friedman(ctx, table_path, as_json, seed, manifest_path):
    """Friedman's rank test across the table's columns."""
    with recording(ctx, ["stats", "friedman"], seed):
        table = AccuracyTable.read(table_path)
        result = friedman_test(table)
        payload = {"chi_square": result.chi_square, "dof": result.dof, "p_value": result.p_value,
                   "mean_ranks": result.mean_ranks, "subjects": len(table.rows)}
        ranks = ", ".join(f"{name} {rank:.3f}" for name, rank in result.mean_ranks.items())
        emit(payload, as_json, [
            f"Friedman chi-square = {result.chi_square:.6g}, dof = {result.dof}, p = {result.p_value:.6g}",
            f"Mean ranks: {ranks}",
        ])


@stats.command()
@click.argument("table_path", type=click.Path(dir_okay=False))
@click.option("--alpha", type=float, default=0.05, show_default=True)
@common_options
@click.pass_context
def pairwise(ctx, table_path, alpha, as_json, seed, manifest_path):
    """Bonferroni-adjusted Wilcoxon signed-rank tests for every column pair."""
    with recording(ctx, ["stats", "pairwise"], seed):
        comparisons = rank_comparisons(pairwise_bonferroni(AccuracyTable.read(table_path), alpha))
        payload = {"comparisons": [
            {"pair": list(c.pair), "raw_p": c.raw_p, "adjusted_p": c.adjusted_p, "significant": c.significant,
             "median_difference": c.median_difference, "statistic": c.statistic}
            for c in comparisons]}
        emit(payload, as_json, [
            f"{c.pair[0]} vs {c.pair[1]}: p = {c.raw_p:.4g}, adjusted p = {c.adjusted_p:.4g}"
            f"{' *' if c.significant else ''} (median difference {c.median_difference:+.3f})"
            for c in comparisons])


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--input-shape", type=(int, int), default=(19, 200), show_default=True,
              help="Electrodes and samples per trial.")
@common_options
@click.pass_context
def plan(ctx, config_path, input_shape, as_json, seed, manifest_path):
    """Print the per-stage shape chain of a config."""
    with recording(ctx, ["plan"], seed):
        config = HyperConfig.load(config_path).validate()
        shape_plan = plan_shapes(config, input_shape)
        payload = {"config_hash": config.config_hash(), "render": shape_plan.render(), **shape_plan.to_dict()}
        emit(payload, as_json, [shape_plan.render()])


@cli.command("import-text")
@click.argument("index_path", type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), required=True)
@click.option("--sample-rate", type=float, default=200.0, show_default=True)
@click.option("--delimiter", type=str, default=None, help="Field separator of the trial files.")
@common_options
@click.pass_context
def import_text(ctx, index_path, output, sample_rate, delimiter, as_json, seed, manifest_path):
    """Convert delimited-text trials (one channel per row) into a dataset."""
    with recording(ctx, ["import-text"], seed, output) as manifest:
        manifest_file = import_delimited(index_path, output, sample_rate, delimiter)
        manifest.add_artifact(manifest_file)
        emit({"manifest": str(manifest_file)}, as_json, [f"Imported trials into {manifest_file}"])


@cli.command()
@click.argument("run_manifest", type=click.Path(dir_okay=False))
@click.pass_context
def rerun(ctx, run_manifest):
    """Re-execute the command recorded in a run manifest."""
    recorded = RunManifest.load(run_manifest)
    command = cli
    for name in recorded.command:
        command = command.get_command(ctx, name) if isinstance(command, click.Group) else None
        if command is None:
            raise click.UsageError(f"Manifest names an unknown command: {' '.join(recorded.command)}")
    if command is rerun:
        raise click.UsageError("Refusing to rerun a rerun")
    logger.info(f"Re-running {' '.join(recorded.command)} from {run_manifest}")
    ctx.invoke(command, **recorded.options)


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI and map failures to exit codes.

    Returns:
        0 on success, 1 on usage errors, 2 on data, shape or configuration
        errors, 3 on numerical failures
    """
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="intertwined-eeg",
                          standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except (DataError, ConfigurationError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        click.echo(f"Numerical failure: {e}", err=True)
        return EXIT_NUMERICAL
    except IntertwinedError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA
