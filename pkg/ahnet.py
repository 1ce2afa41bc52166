"""
AHNET - Anisotropic Hybrid Network toolkit
Command-line entry point: 2D -> 3D weight transfer, two-stage training,
inference, evaluation and benchmarking on anisotropic volumes
"""

import logging
import sys

import click

from commands.bench import bench, describe, report
from commands.data import synth
from commands.evaluate import check_equivalence, eval_dice, eval_froc, infer
from commands.train import train2d, train3d, transfer
from settings import load_settings, save_settings
from utils import AhnetError, set_run_log

logger = logging.getLogger("ahnet")

# ============================================================
# LOGGING
# ============================================================


def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )


# ============================================================
# COMMAND GROUP
# ============================================================


class AhnetGroup(click.Group):
    """Turns library errors into a one-line message and exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except AhnetError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)


@click.group(cls=AhnetGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              envvar="AHNET_CONFIG", help="Config file with AHNET_* keys (dotenv syntax).")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--preset", type=click.Choice(["paper", "desk"]), default=None, help="Network size preset.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--quiet", is_flag=True, help="Hide progress bars.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, seed, preset, out, quiet, verbose):
    """Anisotropic hybrid network pipeline."""
    configure_logging(verbose)
    try:
        settings = load_settings(config_path, {"seed": seed, "preset": preset, "out": out})
    except AhnetError as e:
        raise click.UsageError(str(e))
    ctx.obj = {"settings": settings, "progress": not quiet}
    set_run_log(settings.out)
    save_settings(settings.out, settings)
    logger.debug("Run directory %s (preset %s, seed %d)", settings.out, settings.preset, settings.seed)


for command in (synth, train2d, transfer, train3d, infer, eval_froc, eval_dice, check_equivalence,
                bench, describe, report):
    cli.add_command(command)


if __name__ == "__main__":
    cli()
