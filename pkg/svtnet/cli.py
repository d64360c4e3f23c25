"""
CLI interface for svtnet.

Provides commands: gen-synth, voxelize, train, embed, eval, params, check-grads,
dump-attention, dump-tokens, run, status.

Every command exits 0 on success. On failure it prints one line
`error: <ErrorClass>: <message>` to stderr and exits 1.
"""

import functools
import sys
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
from dotenv import load_dotenv
from rich.table import Table

from svtnet import __version__, checkpoint
from svtnet.config import TRAIN_PROFILES, VARIANT_ALIASES, ExperimentConfig, load_config
from svtnet.dataset import SPLITS, gen_synth, load_index
from svtnet.diagnostics import dump_attention, dump_tokens
from svtnet.gradcheck import run_suite
from svtnet.model import ModelParams, build, count_params
from svtnet.pipeline import Pipeline
from svtnet.retrieval import read_descriptors, recall_curve, write_descriptors, write_report
from svtnet.sparse_tensor import PointCloud, voxelize
from svtnet.stages.embed import embed_index
from svtnet.training import train as run_training
from svtnet.utils import (
    console,
    format_duration,
    print_banner,
    print_info,
    print_success,
    print_warning,
    resolve_log_level,
    setup_logging,
)


def fail(error: BaseException) -> None:
    """Print the one-line machine-parsable error and exit 1."""
    message = " ".join(str(error).split())
    click.echo(f"error: {type(error).__name__}: {message}", err=True)
    sys.exit(1)


def experiment_options(func):
    """--config, --seed, --variant, --workers, --out and --verbose."""

    @click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Experiment config: YAML or key = value file (default: config/svtnet.yaml)",
    )
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Seed for all random streams")
    @click.option(
        "--variant",
        type=click.Choice(sorted(VARIANT_ALIASES), case_sensitive=False),
        help="Network variant",
    )
    @click.option("--workers", type=click.IntRange(min=1), help="Parallel workers")
    @click.option("--out", type=click.Path(path_type=Path), help="Output location")
    @click.option("--verbose", is_flag=True, help="Enable debug logging")
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)

    return wrapper


def load_experiment(
    config_path: Optional[Path],
    seed: Optional[int] = None,
    variant: Optional[str] = None,
    workers: Optional[int] = None,
    output_dir: Optional[Path] = None,
    verbose: bool = False,
    log_to_file: bool = False,
) -> ExperimentConfig:
    """Load the config, apply flag overrides, validate, and set up logging."""
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
        config.synth.seed = seed
    if variant is not None:
        config.model.variant = VARIANT_ALIASES[variant.lower()]
    if workers is not None:
        config.workers = workers
    if output_dir is not None:
        config.output_dir = Path(output_dir)
    config.validate()

    lc = config.logging
    setup_logging(
        config.get_log_file_path() if log_to_file else None,
        resolve_log_level(lc.level, verbose),
        lc.format,
        lc.console,
    )
    return config


def load_or_build(
    checkpoint_path: Optional[Path], config: ExperimentConfig, strict: bool
) -> ModelParams:
    """Checkpoint if given (checked against the config when `strict`), else a fresh model."""
    if checkpoint_path is None:
        return build(config.model, config.seed)
    return checkpoint.load(checkpoint_path, expected=config.model if strict else None)


@click.group()
@click.version_option(version=__version__, prog_name="svtnet")
def main():
    """
    svtnet - Sparse Voxel Transformer place recognition.

    Voxelize point clouds, train SVT-Net descriptors, and evaluate retrieval.
    """
    load_dotenv()


@main.command("gen-synth")
@experiment_options
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")
@click.option("--scenes", type=click.IntRange(min=1), help="Number of scenes")
@click.option("--copies", type=click.IntRange(min=2), help="Jittered copies per scene")
@click.option("--points", type=click.IntRange(min=64), help="Points per cloud")
def gen_synth_cmd(config_path, seed, variant, workers, out, verbose, force, scenes, copies, points):
    """
    Generate the synthetic scene set and its index.csv.

    Examples:

      svtnet gen-synth --out data/synth --seed 7

      svtnet gen-synth --out data/synth --scenes 8 --force
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        synth = config.synth
        for name, value in (("scenes", scenes), ("copies", copies), ("points", points)):
            if value is not None:
                setattr(synth, name, value)
        out_dir = out or config.output_dir / "data"

        index = gen_synth(synth, out_dir, force=force)
        print_success(
            f"Wrote {len(index)} clouds ({synth.scenes} scenes x {synth.copies} copies) to {out_dir}"
        )
    except Exception as e:
        fail(e)


@main.command("voxelize")
@click.argument("cloud", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@experiment_options
@click.option("--step", type=float, help="Quantization step (default: model.quant_step)")
def voxelize_cmd(cloud, config_path, seed, variant, workers, out, verbose, step):
    """
    Quantize a cloud file; write "i j k" voxel lines to --out (or stdout).

    Examples:

      svtnet voxelize scene.bin --out scene.vox
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        step = config.model.quant_step if step is None else step
        grid = voxelize(PointCloud.from_file(cloud), step)

        if out is not None:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            np.savetxt(out, grid.coords, fmt="%d")
        else:
            for i, j, k in grid.coords:
                click.echo(f"{i} {j} {k}")

        lo, hi = grid.coords.min(axis=0), grid.coords.max(axis=0)
        click.echo(
            f"voxels={grid.num_voxels} step={step:g} "
            f"extent=({lo[0]},{lo[1]},{lo[2]})..({hi[0]},{hi[1]},{hi[2]})",
            err=out is None,
        )
    except Exception as e:
        fail(e)


@main.command("train")
@experiment_options
@click.option(
    "--data",
    type=click.Path(exists=True, path_type=Path),
    required=True,
    help="Dataset index CSV or dataset directory",
)
@click.option(
    "--profile", type=click.Choice(sorted(TRAIN_PROFILES)), help="Training schedule profile"
)
@click.option("--epochs", type=click.IntRange(min=1), help="Override the number of epochs")
@click.option("--max-iterations", type=click.IntRange(min=1), help="Stop after N iterations")
def train_cmd(
    config_path, seed, variant, workers, out, verbose, data, profile, epochs, max_iterations
):
    """
    Train on the train split of a dataset.

    Writes epochs.csv, per-epoch checkpoints and model.svtn under --out.

    Examples:

      svtnet train --data data/synth --out runs/svt --seed 0

      svtnet train --data data/synth --variant asvt --max-iterations 200
    """
    try:
        config = load_experiment(
            config_path, seed, variant, workers, out, verbose=verbose, log_to_file=True
        )
        if profile is not None:
            config.training.profile = profile
            for key, value in TRAIN_PROFILES[profile].items():
                setattr(config.training, key, value)
        if epochs is not None:
            config.training.epochs = epochs
        if max_iterations is not None:
            config.training.max_iterations = max_iterations
        config.training.validate()

        dataset = load_index(data, config.output_dir).split("train")
        print_banner(f"Training {config.model.variant} on {len(dataset)} clouds")
        result = run_training(dataset, config, out_dir=config.output_dir)
        last = result.history[-1]
        skipped = sum(record.skipped_batches for record in result.history)
        if skipped:
            print_warning(f"{skipped} degenerate batches skipped")
        print_success(
            f"{result.iterations} iterations, final loss {last.loss:.6f}, "
            f"batch size {last.batch_size}; model at {result.final_checkpoint}"
        )
    except Exception as e:
        fail(e)


@main.command("embed")
@experiment_options
@click.option(
    "--data",
    type=click.Path(exists=True, path_type=Path),
    required=True,
    help="Dataset index CSV or dataset directory",
)
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Trained model (default: untrained model from --seed)",
)
@click.option(
    "--split", type=click.Choice([*SPLITS, "all"]), default="all", help="Which rows to embed"
)
def embed_cmd(config_path, seed, variant, workers, out, verbose, data, checkpoint_path, split):
    """
    Write descriptors (id,northing,easting,f0..) for a dataset split to --out.

    Examples:

      svtnet embed --data data/synth --checkpoint runs/svt/model.svtn --split test --out q.csv
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        params = load_or_build(checkpoint_path, config, strict=variant is not None)
        index = load_index(data, config.output_dir)
        if split != "all":
            index = index.split(split)
        out_file = out or Path(f"descriptors_{split}.csv")

        descriptors, ms = embed_index(params, index, config.workers)
        write_descriptors(out_file, index.ids, index.positions, descriptors)
        print_success(f"Embedded {len(index)} clouds ({ms:.1f} ms/cloud) to {out_file}")
    except Exception as e:
        fail(e)


@main.command("eval")
@experiment_options
@click.option(
    "--db", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True
)
@click.option(
    "--queries", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True
)
@click.option("--radius", type=float, help="Match radius in meters (default: eval.match_radius)")
@click.option("--max-n", type=click.IntRange(min=1), help="Recall curve length")
@click.option("--tag", help="Dataset tag for the report row")
def eval_cmd(config_path, seed, variant, workers, out, verbose, db, queries, radius, max_n, tag):
    """
    Recall@1, recall@1% and the recall curve of queries against a database.

    Recall averages over all queries uniformly.

    Examples:

      svtnet eval --db db.csv --queries q.csv --out reports/
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        ec = config.eval
        database = read_descriptors(db)
        query_db = read_descriptors(queries)
        report = recall_curve(
            database,
            query_db.descriptors,
            query_db.positions,
            max_n=max_n or ec.curve_max_n,
            radius=radius or ec.match_radius,
            workers=config.workers,
            tag=tag or ec.tag,
        )
        out_dir = out or Path("eval")
        paths = write_report(out_dir, [report])
        click.echo(report.summary_line())
        print_info(f"Report written to {', '.join(str(p) for p in paths)}")
    except Exception as e:
        fail(e)


@main.command("params")
@experiment_options
def params_cmd(config_path, seed, variant, workers, out, verbose):
    """
    Print the per-block parameter table of a variant.

    Examples:

      svtnet params --variant svt
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        counts = count_params(build(config.model, config.seed))

        table = Table(title=f"{config.model.variant} parameters")
        table.add_column("Block")
        table.add_column("Parameters", justify="right")
        table.add_column("≈", justify="right")
        for name, n in counts.blocks.items():
            table.add_row(name, f"{n:,}", f"{n / 1000:.1f}K" if n >= 1000 else str(n))
        table.add_row(
            "Total Parameters", f"{counts.total:,}", f"{counts.total / 1e6:.3f}M", style="bold"
        )
        console.print(table)
    except Exception as e:
        fail(e)


@main.command("check-grads")
@experiment_options
@click.option("--tiny/--no-tiny", default=True, help="Include the tiny full-model check")
def check_grads_cmd(config_path, seed, variant, workers, out, verbose, tiny):
    """
    Finite-difference gradient suite; exits 0 iff every check is within tolerance.

    Examples:

      svtnet check-grads --tiny
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        results = run_suite(seed=config.seed, tiny=tiny)

        table = Table(title="Gradient checks")
        for column in ("Tier", "Check", "Max rel. error", "Tolerance", ""):
            table.add_column(column)
        for r in results:
            mark = "[green]ok[/green]" if r.passed else "[red]FAIL[/red]"
            table.add_row(r.tier, r.name, f"{r.error:.2e}", f"{r.tolerance:.0e}", mark)
        console.print(table)

        failed = [r.name for r in results if not r.passed]
        if failed:
            raise AssertionError(f"gradient check failed: {', '.join(failed)}")
        print_success(f"All {len(results)} gradient checks passed")
    except Exception as e:
        fail(e)


@main.command("dump-attention")
@click.argument("cloud", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@experiment_options
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
def dump_attention_cmd(cloud, config_path, seed, variant, workers, out, verbose, checkpoint_path):
    """
    Write ASVT attention (attention.npy), attended features (features.npy) and
    voxel coordinates (voxels.txt) of one cloud to --out.
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        params = load_or_build(checkpoint_path, config, strict=variant is not None)
        dump = dump_attention(params, PointCloud.from_file(cloud))
        paths = dump.write(out or Path("attention"))
        print_success(f"{len(dump.coords)} voxels; wrote {', '.join(str(p) for p in paths)}")
    except Exception as e:
        fail(e)


@main.command("dump-tokens")
@click.argument("cloud", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@experiment_options
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
def dump_tokens_cmd(cloud, config_path, seed, variant, workers, out, verbose, checkpoint_path):
    """Write "i j k token_id" lines (argmax of the CSVT grouping map) of one cloud."""
    try:
        config = load_experiment(config_path, seed, variant, workers, verbose=verbose)
        params = load_or_build(checkpoint_path, config, strict=variant is not None)
        dump = dump_tokens(params, PointCloud.from_file(cloud))
        path = dump.write(out or Path("tokens.txt"))
        used = len(np.unique(dump.token_ids))
        print_success(f"{len(dump.coords)} voxels over {used} tokens; wrote {path}")
    except Exception as e:
        fail(e)


@main.command("run")
@experiment_options
@click.option(
    "--stage",
    "stages",
    multiple=True,
    type=click.Choice(["synth", "train", "embed", "eval"], case_sensitive=False),
    help="Run only these stages (repeatable)",
)
@click.option("--dry-run", is_flag=True, help="Validate configuration without executing")
def run(config_path, seed, variant, workers, out, verbose, stages, dry_run):
    """
    Run the experiment pipeline: synth → train → embed → eval.

    Examples:

      # Full experiment
      svtnet run --config config/synthetic.yaml --out runs/synth

      # Only re-evaluate
      svtnet run --stage embed --stage eval --out runs/synth
    """
    try:
        config = load_experiment(config_path, seed, variant, workers, out, verbose=verbose)
        selected: Optional[List[str]] = [s.lower() for s in stages] or None
        result = Pipeline(config).run(stages=selected, dry_run=dry_run, verbose=verbose)
        if not result.success:
            raise RuntimeError(result.error_message or "pipeline failed")
    except Exception as e:
        fail(e)


@main.command()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Custom configuration file",
)
@click.option("--out", type=click.Path(path_type=Path), help="Experiment directory")
def status(config_path, out):
    """
    Show the last pipeline run recorded in the experiment directory.

    Examples:

      svtnet status --out runs/synth
    """
    try:
        config = load_config(config_path)
        if out is not None:
            config.output_dir = Path(out)
        last_run = Pipeline(config).status()

        if not last_run:
            print_info("No previous pipeline runs found")
            return

        status_text = "SUCCESS" if last_run.success else "FAILED"
        click.echo(f"Last Run: {last_run.started_at.strftime('%Y-%m-%d %H:%M:%S')}")
        click.echo(f"Status: {status_text}")
        click.echo(f"Duration: {format_duration(last_run.duration_seconds)}")
        if last_run.error_message:
            click.echo(f"Error: {last_run.error_message}")

        if last_run.stages:
            click.echo("Stages:")
            for name, stage in last_run.stages.items():
                mark = "ok" if stage.success else "FAILED"
                duration = format_duration(stage.duration_seconds)
                click.echo(
                    f"  {mark:<6} {name:<8} {duration:>8}  {stage.records_processed:>6} records"
                )
    except Exception as e:
        fail(e)


if __name__ == "__main__":
    main()
