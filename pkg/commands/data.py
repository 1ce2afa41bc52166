"""
Dataset commands for AHNET
"""

import click

from commands.runs import done, run_path, settings_of
from core.synth import synth_dataset


@click.command("synth")
@click.pass_context
def synth(ctx):
    """Generate the synthetic anisotropic train/test volumes."""
    settings = settings_of(ctx)
    train, test = synth_dataset(settings, run_path(settings, "data"))
    done(f"Wrote {len(train)} training and {len(test)} test volumes to {run_path(settings, 'data')}")
