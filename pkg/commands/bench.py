"""
Benchmark, architecture audit and report commands for AHNET
"""

import click

from commands.runs import STAGE1_CKPT, STAGE2_CKPT, checkpoint, done, run_path, settings_of, write_json
from core.graph import count_conv_layers, dump_graph, parameter_count
from core.inference import benchmark_inference
from core.nets import build_ahnet, build_mcgcn, net_preset
from core.report import render_report
from core.training import load_model, output_channels
from utils import format_count, format_ms


def _models(settings, trained):
    """Both networks, from the run's checkpoints when trained is set."""
    if trained:
        return (load_model("mcgcn", checkpoint(settings, STAGE1_CKPT), settings),
                load_model("ahnet", checkpoint(settings, STAGE2_CKPT), settings))
    net = net_preset(settings.preset, output_channels(settings.task))
    return build_mcgcn(net, seed=settings.seed), build_ahnet(net, seed=settings.seed)


@click.command("bench")
@click.option("--trained/--untrained", default=False,
              help="Time the run's checkpoints instead of freshly initialized networks.")
@click.pass_context
def bench(ctx, trained):
    """Slice-wise 2D vs hybrid 3D inference time per volume."""
    settings = settings_of(ctx)
    cfg = settings.bench
    model2d, model3d = _models(settings, trained)
    report = benchmark_inference(model2d, model3d, cfg.dims, cfg.repeats, cfg.warmup, seed=settings.seed,
                                 preset=settings.preset, progress=ctx.obj["progress"])
    write_json(run_path(settings, "bench.json"), report)
    done(f"Slice-wise 2D {format_ms(report['slicewise_2d_mean_ms'] / 1000.0)}, "
         f"hybrid 3D {format_ms(report['hybrid_3d_mean_ms'] / 1000.0)}, ratio {report['ratio']:.2f}")


@click.command("describe")
@click.pass_context
def describe(ctx):
    """Parameter and convolution-layer counts plus JSON graph dumps for both networks."""
    settings = settings_of(ctx)
    net = net_preset(settings.preset, output_channels(settings.task))
    patch = tuple(settings.train.patch)
    summary = {"preset": settings.preset, "net": net.to_dict()}
    for kind, model, shape in (("mcgcn", build_mcgcn(net, seed=settings.seed), (1, net.in_slices) + patch[:2]),
                               ("ahnet", build_ahnet(net, seed=settings.seed), (1, 1) + patch)):
        run_path(settings, f"graph_{kind}.json").parent.mkdir(parents=True, exist_ok=True)
        run_path(settings, f"graph_{kind}.json").write_text(dump_graph(model, shape) + "\n", encoding="utf-8")
        summary[kind] = {"parameters": parameter_count(model), "conv_layers": count_conv_layers(model)}
        click.echo(f"{kind}: {format_count(summary[kind]['parameters'])} parameters, "
                   f"{summary[kind]['conv_layers']['grouped']} conv layers")
    write_json(run_path(settings, "architecture.json"), summary)


@click.command("report")
@click.pass_context
def report(ctx):
    """Plots and summary table from the run's CSV outputs."""
    settings = settings_of(ctx)
    written = render_report(run_path(settings), settings.task)
    done("Wrote " + ", ".join(p.name for p in written))
