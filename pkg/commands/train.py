"""
Training commands for AHNET
Stage one (MC-GCN), the 2D -> 3D transfer and stage two (AH-Net).
"""

import dataclasses

import click

from commands.runs import (ENCODER_CKPT, STAGE1_CKPT, STAGE2_CKPT, checkpoint, dataset, done, run_path,
                           settings_of, write_json)
from core.training import train_stage1_mcgcn, train_stage2_ahnet, transfer_from_stage1, write_history
from core.transfer import rules_to_json
from store import save_checkpoint
from utils import EquivalenceError, log_event


def _final_loss(history):
    return history[-1]["loss"] if history else float("nan")


@click.command("train2d")
@click.pass_context
def train2d(ctx):
    """Stage one: train the 2D MC-GCN on slice triples."""
    settings = settings_of(ctx)
    volumes = dataset(settings, "train")
    ckpt, history = train_stage1_mcgcn(volumes, settings, progress=ctx.obj["progress"])
    save_checkpoint(run_path(settings, STAGE1_CKPT), ckpt)
    write_history(history, run_path(settings, "loss_stage1.csv"))
    done(f"Stage one finished: {len(history)} steps, final loss {_final_loss(history):.5g}")


@click.command("transfer")
@click.option("--validate/--no-validate", default=True, help="Check slice equivalence before writing.")
@click.option("--overrides", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON list of {source, target, kind} rules merged over the automatic map.")
@click.pass_context
def transfer(ctx, validate, overrides):
    """Lift the stage-one encoder into a 3D encoder checkpoint."""
    settings = settings_of(ctx)
    ckpt2d = checkpoint(settings, STAGE1_CKPT)
    try:
        rules, encoder, report = transfer_from_stage1(ckpt2d, settings, validate=validate, overrides=overrides)
    except EquivalenceError as e:
        if e.report is not None:
            write_json(run_path(settings, "transfer_report.json"), e.report.to_dict())
        raise
    save_checkpoint(run_path(settings, ENCODER_CKPT), encoder)
    run_path(settings, "transfer_rules.json").write_text(rules_to_json(rules) + "\n", encoding="utf-8")
    payload = report.to_dict()
    payload["random_init"] = encoder.meta.get("random_init", [])
    write_json(run_path(settings, "transfer_report.json"), payload)
    log_event("transfer", stage="transfer", details={"rules": len(rules), "tensors": len(encoder),
                                                     "validated": validate})
    done(f"Transferred {len(encoder)} tensors with {len(rules)} rules"
         + (f"; max slice residual {report.max_residual:.3g}" if validate else ""))


@click.command("train3d")
@click.option("--joint/--no-joint", default=None, help="Override the joint fine-tuning phase.")
@click.pass_context
def train3d(ctx, joint):
    """Stage two: train the AH-Net decoder on the locked transferred encoder."""
    settings = settings_of(ctx)
    if joint is not None:
        settings = dataclasses.replace(settings, train=dataclasses.replace(settings.train, joint=joint))
    volumes = dataset(settings, "train")
    encoder = checkpoint(settings, ENCODER_CKPT)
    ckpt, history = train_stage2_ahnet(volumes, encoder, settings, progress=ctx.obj["progress"])
    save_checkpoint(run_path(settings, STAGE2_CKPT), ckpt)
    write_history(history, run_path(settings, "loss_stage2.csv"))
    done(f"Stage two finished: {len(history)} steps, final loss {_final_loss(history):.5g}")
