import functools
import logging
from pathlib import Path
from typing import Optional

import click

import numerics
import pipeline_service
from exceptions import OFDiffError
from models.run_config import RunConfig
from settings import get_settings
from util.convert_yaml import dump_run_config, load_run_config
from util.json_log import configure_logging

logger = logging.getLogger("ofdiff")

PATH = click.Path(path_type=Path)
EXISTING = click.Path(path_type=Path, exists=True)


class Context:
    def __init__(self, config: RunConfig, progress: bool):
        self.config = config
        self.progress = progress


def command_options(func):
    """--config/--seed/--deterministic, resolved into a Context passed as `ctx`."""

    @click.option("--config", "config_path", type=EXISTING, default=None, help="Run configuration (YAML).")
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the config seed.")
    @click.option("--deterministic", is_flag=True, default=False, help="Single-threaded, deterministic kernels.")
    @functools.wraps(func)
    def wrapper(config_path: Optional[Path], seed: Optional[int], deterministic: bool, **kwargs):
        settings = get_settings()
        configure_logging(settings.log)
        try:
            numerics.configure_determinism(deterministic or settings.deterministic, settings.num_threads)
            config = load_run_config(config_path)
            if seed is not None:
                config = config.model_copy(update={"seed": seed})
            return func(Context(config, progress=settings.log != "error"), **kwargs)
        except OFDiffError as e:
            logger.error("command failed", extra={"error": type(e).__name__, "detail": str(e)})
            raise click.ClickException(str(e))

    return wrapper


@click.group()
def cli():
    """Object-fidelity layout-to-image diffusion at desk scale."""


@cli.command("gen-data")
@command_options
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--force", is_flag=True, default=False)
def gen_data(ctx: Context, out_dir: Path, force: bool):
    manifests = pipeline_service.cmd_gen_data(ctx.config, out_dir, force)
    for split, manifest in manifests.items():
        click.echo(f"{split}: {manifest.count} scenes, digest {manifest.digest}")


@cli.command()
@command_options
@click.option("--data", "data_dir", type=EXISTING, required=True)
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--resume", type=EXISTING, default=None, help="Continue from a training checkpoint.")
@click.option("--force", is_flag=True, default=False)
def train(ctx: Context, data_dir: Path, out_dir: Path, resume: Optional[Path], force: bool):
    path = pipeline_service.cmd_train(ctx.config, data_dir, out_dir, resume, force, ctx.progress)
    click.echo(str(path))


@cli.command()
@command_options
@click.option("--checkpoint", type=EXISTING, required=True)
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--layouts", "layouts_file", type=EXISTING, default=None)
@click.option("--random-layouts", type=click.IntRange(min=1), default=None)
@click.option("--pool", "pool_dir", type=EXISTING, default=None)
@click.option("--data", "data_dir", type=EXISTING, default=None)
@click.option("--force", is_flag=True, default=False)
def sample(ctx: Context, checkpoint, out_dir, layouts_file, random_layouts, pool_dir, data_dir, force):
    outputs = pipeline_service.cmd_sample(
        ctx.config, checkpoint, out_dir, layouts_file, random_layouts, pool_dir, data_dir, force, ctx.progress
    )
    click.echo(f"{len(outputs)} images written to {out_dir}")


@cli.command()
@command_options
@click.option("--checkpoint", type=EXISTING, required=True)
@click.option("--data", "data_dir", type=EXISTING, required=True)
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--toy-reward", is_flag=True, default=False, help="Use the brightness reward instead of KNN-KL.")
@click.option("--force", is_flag=True, default=False)
def ddpo(ctx: Context, checkpoint: Path, data_dir: Path, out_dir: Path, toy_reward: bool, force: bool):
    path = pipeline_service.cmd_ddpo(ctx.config, checkpoint, data_dir, out_dir, toy_reward, force, ctx.progress)
    click.echo(str(path))


@cli.command("eval")
@command_options
@click.option("--generated", "generated_dir", type=EXISTING, required=True)
@click.option("--reference", "reference_dir", type=EXISTING, required=True)
@click.option("--layouts", "layouts_file", type=EXISTING, required=True)
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--force", is_flag=True, default=False)
def evaluate(ctx: Context, generated_dir, reference_dir, layouts_file, out_dir, workers, force):
    pipeline_service.cmd_eval(ctx.config, generated_dir, reference_dir, layouts_file, out_dir, workers, force)
    click.echo((out_dir / "report.txt").read_text(), nl=False)


@cli.command()
@command_options
@click.option("--data", "data_dir", type=EXISTING, required=True)
@click.option("--out", "out_dir", type=PATH, required=True)
@click.option("--with-ddpo", is_flag=True, default=False, help="Run the DDPO stage even if ddpo.enabled is false.")
@click.option("--force", is_flag=True, default=False)
def ablate(ctx: Context, data_dir: Path, out_dir: Path, with_ddpo: bool, force: bool):
    for row in pipeline_service.cmd_ablate(ctx.config, data_dir, out_dir, with_ddpo, force, ctx.progress):
        mmd = "-" if row["mmd"] is None else f"{row['mmd']:.6f}"
        iou = "-" if row["iou"] is None else f"{row['iou']:.4f}"
        click.echo(f"{row['variant']:<12} iou {iou}  mmd {mmd}")


@cli.command("init-config")
@click.option("--out", "out_file", type=PATH, default=None, help="Write here instead of stdout.")
def init_config(out_file: Optional[Path]):
    text = dump_run_config(RunConfig())
    if out_file is None:
        click.echo(text, nl=False)
    else:
        out_file.write_text(text)


if __name__ == "__main__":
    cli()
