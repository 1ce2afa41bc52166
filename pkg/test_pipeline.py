"""
End-to-end command-line tests for AHNET
"""

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from ahnet import cli
from core.inference import infer_volume
from core.training import load_model
from settings import KEYS, TilingConfig, load_settings
from store import load_checkpoint, load_dataset

RERUN_IDENTICAL = ("loss_stage1.csv", "loss_stage2.csv", "froc.csv", "froc_mcgcn.csv", "froc_curve.csv")


def _config_file(settings, path):
    """Write resolved settings back out as an AHNET_* config file."""
    lines = []
    for key, (section, name, _) in KEYS.items():
        value = getattr(settings if section is None else getattr(settings, section), name)
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def run(tiny_settings, tmp_path):
    runner = CliRunner()
    config = _config_file(tiny_settings, tmp_path / "ahnet.env")

    def invoke(*args, expect=0):
        result = runner.invoke(cli, ["--config", str(config), "--quiet", *args])
        assert result.exit_code == expect, result.output
        return result

    invoke.out = tiny_settings.run_dir
    return invoke


def test_config_file_round_trips(tiny_settings, tmp_path):
    path = _config_file(tiny_settings, tmp_path / "ahnet.env")
    assert load_settings(path, environ={}) == tiny_settings


def test_synth_writes_settings_and_identical_data_per_seed(run, tmp_path):
    run("synth")
    first = sorted((run.out / "data" / "train").iterdir())
    assert len([p for p in first if p.suffix == ".avol"]) == 3
    assert json.loads((run.out / "settings.json").read_text())["seed"] == 3
    assert (run.out / "run_log.jsonl").read_text().count('"action": "synth"') == 1

    other = tmp_path / "again"
    run("--out", str(other), "synth")
    for p in first:
        assert (other / "data" / "train" / p.name).read_bytes() == p.read_bytes()


def test_missing_artifacts_exit_with_status_one(run):
    result = run("report", expect=1)
    assert "Error: Missing artifacts" in result.output
    result = run("train2d", expect=1)
    assert "data/train" in result.output


def test_bad_configuration_is_a_usage_error(tmp_path):
    bad = tmp_path / "bad.env"
    bad.write_text("AHNET_TRAIN_POSITIVE_FRACTION=2\n")
    result = CliRunner().invoke(cli, ["--config", str(bad), "--out", str(tmp_path / "run"), "synth"])
    assert result.exit_code == 2
    assert "AHNET_TRAIN_POSITIVE_FRACTION" in result.output


def test_describe_and_untrained_check(run):
    run("describe")
    arch = json.loads((run.out / "architecture.json").read_text())
    assert arch["ahnet"]["parameters"] > arch["mcgcn"]["parameters"] > 0
    assert json.loads((run.out / "graph_ahnet.json").read_text())["layers"]
    run("check-equivalence")
    report = json.loads((run.out / "equivalence.json").read_text())
    assert report["source"] == "random init"


@pytest.mark.slow
def test_detection_pipeline(run):
    for command in ("synth", "train2d", "transfer", "train3d", "infer", "eval-froc", "bench", "report"):
        run(command)
    for name in ("stage1.ckpt", "encoder3d.ckpt", "stage2.ckpt", "loss_stage1.csv", "loss_stage2.csv",
                 "transfer_rules.json", "transfer_report.json", "froc.csv", "froc_mcgcn.csv", "froc_curve.csv",
                 "eval_meta.json", "bench.json", "froc.png", "loss.png", "summary.csv"):
        assert (run.out / name).is_file(), name
    assert json.loads((run.out / "transfer_report.json").read_text())["passed"]
    bench = json.loads((run.out / "bench.json").read_text())
    assert bench["slices"] == 4 and bench["repeats"] == 3

    summary = (run.out / "summary.csv").read_bytes()
    run("report")
    assert (run.out / "summary.csv").read_bytes() == summary

    run("check-equivalence")
    assert json.loads((run.out / "equivalence.json").read_text())["source"] == "stage1.ckpt"

    again = run.out.parent / "again"
    for command in ("synth", "train2d", "transfer", "train3d", "infer", "eval-froc"):
        run("--out", str(again), command)
    for name in RERUN_IDENTICAL:
        assert (again / name).read_bytes() == (run.out / name).read_bytes(), name


def _epoch_means(history, stage):
    rows = history[history["stage"] == stage]
    return rows.groupby("epoch")["base_loss"].mean().sort_index()


def _tpr_within(curve, fp):
    return curve.loc[curve["fp_per_volume"] <= fp + 1e-12, "tpr"].max()


def _tpr_at(grid, fp):
    return grid.loc[np.isclose(grid["fp_per_volume"], fp), "tpr"].item()


@pytest.mark.slow
def test_desk_detection_experiment(tmp_path):
    """Default desk settings: 40 training and 10 test volumes, two-stage training, FROC and benchmark."""
    out = tmp_path / "desk"
    runner = CliRunner()
    for command in ("synth", "train2d", "transfer", "train3d", "infer", "eval-froc", "bench"):
        result = runner.invoke(cli, ["--out", str(out), "--seed", "0", "--quiet", command])
        assert result.exit_code == 0, result.output

    curve = pd.read_csv(out / "froc_curve.csv")
    assert _tpr_within(curve, 1.0) >= 0.8
    ahnet, mcgcn = pd.read_csv(out / "froc.csv"), pd.read_csv(out / "froc_mcgcn.csv")
    assert _tpr_at(ahnet, 0.25) >= _tpr_at(mcgcn, 0.25)

    bench = json.loads((out / "bench.json").read_text())
    assert bench["dims"] == [64, 64, 16] and bench["repeats"] >= 10
    assert bench["ratio"] > 1.0

    stage1 = _epoch_means(pd.read_csv(out / "loss_stage1.csv"), "stage1")
    stage2 = _epoch_means(pd.read_csv(out / "loss_stage2.csv"), "stage2")
    assert stage1.iloc[-1] <= 0.7 * stage1.iloc[0]
    assert stage2.iloc[-1] <= 0.7 * stage2.iloc[0]

    settings = load_settings(environ={}, overrides={"out": str(out), "seed": 0})
    model = load_model("ahnet", load_checkpoint(out / "stage2.ckpt"), settings)
    volume = load_dataset(out / "data" / "test")[0].data
    full = infer_volume(model, volume, TilingConfig(tile=(64, 64, 8), stride=(32, 32, 4)))
    half = infer_volume(model, volume, TilingConfig(tile=(32, 32, 4), stride=(16, 16, 2)))
    assert np.sqrt(np.mean((full - half) ** 2)) < 1e-3


@pytest.mark.slow
def test_segmentation_pipeline(tiny_settings, tmp_path):
    settings = replace(tiny_settings, task="segmentation", train=replace(tiny_settings.train, joint=False))
    config = _config_file(settings, tmp_path / "seg.env")
    runner = CliRunner()
    for command in ("synth", "train2d", "transfer", "train3d", "infer", "eval-dice", "report"):
        result = runner.invoke(cli, ["--config", str(config), "--quiet", command])
        assert result.exit_code == 0, result.output
    lines = (settings.run_dir / "dice.csv").read_text().splitlines()
    assert lines[0] == "volume_id,dice"
    assert [line.split(",")[0] for line in lines[-2:]] == ["DG", "DPC"]
