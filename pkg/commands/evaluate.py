"""
Inference and evaluation commands for AHNET
"""

import click
import numpy as np

from commands.runs import (RESPONSES, STAGE1_CKPT, STAGE2_CKPT, checkpoint, dataset, done, require, run_path,
                           settings_of, write_json)
from core.evaluation import (curve_frame, dice, dice_frame, dice_global, dice_per_case, extract_maxima,
                             froc_at, froc_curve, froc_frame, write_csv)
from core.inference import infer_volume, infer_volume_slicewise, response_map
from core.nets import build_ahnet, build_mcgcn, net_preset
from core.training import load_model, output_channels
from core.transfer import DEFAULT_TOLERANCE, build_transfer_map, transfer_encoder, validate_slice_equivalence
from store import Volume, checkpoint_from_model, list_volumes, load_dataset, read_volume, write_volume
from utils import EquivalenceError, EvaluationError, log_event

MODELS = ("ahnet", "mcgcn")


@click.command("infer")
@click.option("--model", "models", type=click.Choice(MODELS), multiple=True,
              help="Models to run (default: both).")
@click.pass_context
def infer(ctx, models):
    """Write response volumes for every test volume."""
    settings = settings_of(ctx)
    models = models or MODELS
    volumes = dataset(settings, "test")
    for kind in models:
        ckpt = checkpoint(settings, STAGE2_CKPT if kind == "ahnet" else STAGE1_CKPT)
        model = load_model(kind, ckpt, settings)
        out_dir = run_path(settings, RESPONSES, kind)
        with click.progressbar(volumes, label=f"{kind} inference", show_eta=False) as bar:
            for v in bar:
                if kind == "ahnet":
                    output = infer_volume(model, v.data, settings.tiling)
                else:
                    output = infer_volume_slicewise(model, v.data)
                response = response_map(output, settings.task).astype(np.float32)
                mask = response.astype(np.uint8) if settings.task == "segmentation" else None
                write_volume(out_dir / f"{v.name}.avol", Volume(response, v.spacing, mask, [], v.name))
        log_event("infer", stage="eval", details={"model": kind, "volumes": len(volumes)})
    done(f"Responses written to {run_path(settings, RESPONSES)}")


def _responses(settings, kind, volumes):
    (path,) = require(settings, f"{RESPONSES}/{kind}")
    by_name = {p.stem: p for p in list_volumes(path)}
    missing = [v.name for v in volumes if v.name not in by_name]
    if missing:
        raise EvaluationError(f"No {kind} response for {', '.join(missing[:5])}; run infer first")
    return [read_volume(by_name[v.name]).data for v in volumes]


@click.command("eval-froc")
@click.pass_context
def eval_froc(ctx):
    """FROC on the test set for every model with responses."""
    settings = settings_of(ctx)
    cfg = settings.eval
    volumes = dataset(settings, "test")
    boxes = [v.boxes for v in volumes]
    available = [k for k in MODELS if run_path(settings, RESPONSES, k).is_dir()]
    if not available:
        require(settings, f"{RESPONSES}/ahnet")
    meta = {"threshold": cfg.threshold, "radius": list(cfg.radius), "grid": list(cfg.grid),
            "volumes": len(volumes), "lesions": sum(len(b) for b in boxes), "models": {}}
    for kind in available:
        findings = [extract_maxima(r, cfg.threshold, tuple(cfg.radius)) for r in _responses(settings, kind, volumes)]
        curve = froc_curve(findings, boxes)
        grid = froc_at(curve, cfg.grid)
        write_csv(froc_frame(grid), run_path(settings, "froc.csv" if kind == "ahnet" else f"froc_{kind}.csv"))
        if kind == "ahnet":
            write_csv(curve_frame(curve), run_path(settings, "froc_curve.csv"))
        meta["models"][kind] = {"findings": sum(len(f) for f in findings),
                                "tpr": {f"{p.fp_per_volume:.2f}": p.tpr for p in grid}}
        click.echo(f"{kind}: " + "  ".join(f"FP={p.fp_per_volume:.2f} TPR={p.tpr:.3f}" for p in grid))
    write_json(run_path(settings, "eval_meta.json"), meta)
    log_event("eval_froc", stage="eval", details=meta)


@click.command("eval-dice")
@click.pass_context
def eval_dice(ctx):
    """Dice per volume plus Dice global and Dice per case for AH-Net masks."""
    settings = settings_of(ctx)
    volumes = dataset(settings, "test")
    missing = [v.name for v in volumes if v.mask is None]
    if missing:
        raise EvaluationError(f"Test volumes without masks: {', '.join(missing[:5])}")
    predicted = [r > 0.5 for r in _responses(settings, "ahnet", volumes)]
    pairs = [(p, v.mask) for p, v in zip(predicted, volumes)]
    scores = [dice(a, b) for a, b in pairs]
    dg, dpc = dice_global(pairs), dice_per_case(pairs)
    write_csv(dice_frame([v.name for v in volumes], scores, dg, dpc), run_path(settings, "dice.csv"))
    log_event("eval_dice", stage="eval", details={"dg": dg, "dpc": dpc, "volumes": len(volumes)})
    done(f"Dice global {dg:.4f}, Dice per case {dpc:.4f}")


@click.command("check-equivalence")
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True)
@click.option("--volume", "volume_path", type=click.Path(exists=True), default=None,
              help="Volume file or dataset directory to check with (default: a random patch).")
@click.pass_context
def check_equivalence(ctx, tolerance, volume_path):
    """Compare the 2D encoder per slice with its lifted 3D encoder."""
    settings = settings_of(ctx)
    net = net_preset(settings.preset, output_channels(settings.task))
    ckpt_path = run_path(settings, STAGE1_CKPT)
    if ckpt_path.is_file():
        model2d = load_model("mcgcn", checkpoint(settings, STAGE1_CKPT), settings)
    else:
        model2d = build_mcgcn(net, seed=settings.seed)
    encoder = transfer_encoder(checkpoint_from_model(model2d), build_transfer_map(model2d.layers))
    model3d = build_ahnet(net, encoder, seed=settings.seed)

    if volume_path is None:
        rng = np.random.default_rng(settings.seed + 7)
        volume = rng.standard_normal(tuple(settings.train.patch)).astype(np.float32)
    elif str(volume_path).endswith(".avol"):
        volume = read_volume(volume_path).data
    else:
        volume = load_dataset(volume_path)[0].data

    report = validate_slice_equivalence(model2d, model3d, volume, tolerance=tolerance, strict=False)
    payload = report.to_dict()
    payload["source"] = "stage1.ckpt" if ckpt_path.is_file() else "random init"
    payload["volume_dims"] = list(np.shape(volume))
    write_json(run_path(settings, "equivalence.json"), payload)
    if not report.passed:
        raise EquivalenceError(f"Slice equivalence fails at {report.first_failure} "
                               f"(residual {report.max_residual:.3g} > {tolerance:g})", report=report)
    done(f"Slice equivalence holds on {len(report.layers)} layers (max residual {report.max_residual:.3g})")
