"""
Training tests for AHNET
Loss schedule, loss history files and the two training stages on tiny data.
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core.nets import build_ahnet, build_mcgcn, net_preset
from core.objectives import Box3D
from core.synth import synth_generate
from core.training import (LOSS_COLUMNS, LossSchedule, load_model, train_stage1_mcgcn, train_stage2_ahnet,
                           transfer_from_stage1, write_history)
from settings import TrainConfig
from store import Volume, checkpoint_from_model, load_dataset
from utils import TrainingDivergedError


@pytest.fixture
def train_volumes(tiny_settings, tmp_path):
    synth_generate(tiny_settings.synth, 2, tmp_path / "train", seed=5)
    return load_dataset(tmp_path / "train")


def _untrained_encoder(settings):
    ckpt = checkpoint_from_model(build_mcgcn(net_preset(settings.preset), seed=settings.seed))
    return transfer_from_stage1(ckpt, settings, validate=False)[1]


# ============================================================
# LOSS SCHEDULE
# ============================================================


def test_schedule_switches_once_the_loss_plateaus():
    schedule = LossSchedule.from_config("detection", TrainConfig(plateau_window=3, plateau_tolerance=0.01))
    means = [1.0, 0.9, 0.8, 0.7, 0.699, 0.698, 0.697, 0.5]
    switched = [schedule.end_epoch(i, m) for i, m in enumerate(means)]
    assert switched == [False] * 6 + [True, False]
    assert schedule.switched_at == 6
    assert schedule.kind == "focal_l2"


def test_schedule_never_switches_inside_the_first_window():
    schedule = LossSchedule.from_config("segmentation", TrainConfig(plateau_window=3))
    assert not any(schedule.end_epoch(i, 1.0) for i in range(3))
    assert schedule.kind == "ce"
    assert schedule.end_epoch(3, 1.0)
    assert schedule.kind == "focal_ce"


def test_loss_history_csv(tmp_path):
    history = [{"stage": "stage1", "epoch": 0, "step": 0, "loss_kind": "l2", "loss": 0.123456789,
                "base_loss": 0.123456789}]
    path = tmp_path / "loss_stage1.csv"
    write_history(history, path)
    assert path.read_text().splitlines() == [",".join(LOSS_COLUMNS), "stage1,0,0,l2,0.12345679,0.12345679"]


# ============================================================
# STAGES
# ============================================================


def test_stage1_then_transfer(tiny_settings, train_volumes):
    ckpt, history = train_stage1_mcgcn(train_volumes, tiny_settings, progress=False)
    assert len(history) == 2
    assert {r["loss_kind"] for r in history} == {"l2"}
    assert all(np.isfinite(r["loss"]) for r in history)
    assert ckpt.meta["preset"] == "desk"

    rules, encoder, report = transfer_from_stage1(ckpt, tiny_settings, validate=True)
    assert report.passed
    assert encoder.tensors["stem.conv.weight"].shape[-1] == 3
    assert {r.source for r in rules} <= set(ckpt.tensors)
    load_model("mcgcn", ckpt, tiny_settings)


def test_stage1_stops_on_a_non_finite_loss(tiny_settings):
    data = np.full((32, 32, 8), np.nan, dtype=np.float32)
    volumes = [Volume(data, boxes=[Box3D((16, 16, 4), (6, 6, 2))], name="vol_000")]
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train_stage1_mcgcn(volumes, tiny_settings, progress=False)


def test_locked_phase_trains_only_the_decoder(tiny_settings, train_volumes):
    settings = replace(tiny_settings, train=replace(tiny_settings.train, joint=False))
    encoder = _untrained_encoder(settings)
    ckpt, history = train_stage2_ahnet(train_volumes, encoder, settings, progress=False)
    assert {r["stage"] for r in history} == {"stage2"}
    for name, value in encoder.tensors.items():
        assert np.array_equal(ckpt.tensors[name], value), name
    initial = build_ahnet(net_preset(settings.preset), encoder, seed=settings.seed).state()
    decoder = [n for n in ckpt.tensors if n.startswith("decoder") and n.endswith(".weight")]
    assert any(not np.array_equal(ckpt.tensors[n], initial[n]) for n in decoder)
    load_model("ahnet", ckpt, settings)


@pytest.mark.slow
def test_joint_phase_updates_the_encoder(tiny_settings, train_volumes):
    encoder = _untrained_encoder(tiny_settings)
    ckpt, history = train_stage2_ahnet(train_volumes, encoder, tiny_settings, progress=False)
    assert [r["stage"] for r in history] == ["stage2"] * 2 + ["joint"] * 2
    assert [r["step"] for r in history] == [0, 1, 0, 1]
    assert not np.array_equal(ckpt.tensors["stem.conv.weight"], encoder.tensors["stem.conv.weight"])
    assert pd.DataFrame(history)["loss"].notna().all()


@pytest.mark.slow
def test_prefetching_does_not_change_a_two_phase_run(tiny_settings, train_volumes):
    encoder = _untrained_encoder(tiny_settings)
    train = replace(tiny_settings.train, augment=True)
    sync, sync_history = train_stage2_ahnet(train_volumes, encoder, replace(tiny_settings, train=train),
                                            progress=False)
    ahead, ahead_history = train_stage2_ahnet(train_volumes, encoder,
                                              replace(tiny_settings, train=replace(train, prefetch=2)),
                                              progress=False)
    assert [r["loss"] for r in ahead_history] == [r["loss"] for r in sync_history]
    for name, value in sync.tensors.items():
        assert np.array_equal(ahead.tensors[name], value), name
