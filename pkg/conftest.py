"""
Shared pytest fixtures for AHNET
"""

import numpy as np
import pytest

from core import tensor as T
from core.nets import NetConfig
from settings import Settings, SynthConfig, TrainConfig, TilingConfig, BenchConfig
from utils import set_run_log


@pytest.fixture
def float64():
    """64-bit verification mode for gradient checks."""
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def no_run_log():
    set_run_log(None)
    yield
    set_run_log(None)


@pytest.fixture
def tiny_net():
    """Smallest desk-shaped network; same wiring as the presets."""
    return NetConfig(preset="desk", stem_width=4, stage_widths=(8, 8, 8, 8), stage_blocks=(1, 1, 1, 1),
                     decoder_taps=("stage2", "stage3", "stage4"), gcn_kernels=(5, 3, 3), decoder_width=4,
                     pyramid_pools=(4, 2), out_channels=1).validate()


@pytest.fixture
def tiny_settings(tmp_path):
    """Settings small enough for a seconds-long training run."""
    return Settings(
        seed=3,
        out=str(tmp_path / "run"),
        synth=SynthConfig(dims=(32, 32, 8), train_volumes=3, test_volumes=2, lesions_min=1, lesions_max=1,
                          extent_xy=(6.0, 8.0), extent_z=(2.0, 3.0)),
        train=TrainConfig(patch=(32, 32, 4), batch_size=1, epochs_stage1=1, epochs_stage2=1, epochs_joint=1,
                          steps_per_epoch=2, augment=False),
        tiling=TilingConfig(tile=(32, 32, 4), stride=(16, 16, 2)),
        bench=BenchConfig(dims=(32, 32, 4), repeats=3, warmup=0),
    )
