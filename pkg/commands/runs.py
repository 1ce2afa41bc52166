"""
Run directory helpers shared by the AHNET commands
Artifact names, presence checks and JSON output.
"""

import json
from pathlib import Path

import click

from store import load_checkpoint, load_dataset
from utils import EvaluationError, get_error_message

TRAIN_DATA = "data/train"
TEST_DATA = "data/test"
STAGE1_CKPT = "stage1.ckpt"
ENCODER_CKPT = "encoder3d.ckpt"
STAGE2_CKPT = "stage2.ckpt"
RESPONSES = "responses"


def settings_of(ctx):
    return ctx.obj["settings"]


def run_path(settings, *parts):
    return Path(settings.out).joinpath(*parts)


def require(settings, *names):
    """Raise listing every missing artifact of the run directory."""
    missing = [name for name in names if not run_path(settings, name).exists()]
    if missing:
        raise EvaluationError(get_error_message('missing_artifacts', names=", ".join(missing)))
    return [run_path(settings, name) for name in names]


def dataset(settings, split):
    (path,) = require(settings, TRAIN_DATA if split == "train" else TEST_DATA)
    return load_dataset(path)


def checkpoint(settings, name):
    (path,) = require(settings, name)
    return load_checkpoint(path)


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def done(message):
    click.echo(message)
