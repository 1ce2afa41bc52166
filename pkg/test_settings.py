"""
Configuration tests for AHNET
"""

import json

import pytest

from settings import KEYS, Settings, load_settings, save_settings
from utils import ConfigError


def test_defaults_without_any_source():
    s = load_settings(environ={})
    assert s == Settings()
    assert s.train.patch == (64, 64, 8)
    assert s.train.intensity_range == ()


def test_file_environment_and_overrides_layer_in_order(tmp_path):
    path = tmp_path / "ahnet.env"
    path.write_text("AHNET_SEED=5\nAHNET_PRESET=paper\nAHNET_TRAIN_PATCH=32,32,4\n")
    s = load_settings(path, environ={"AHNET_SEED": "9"})
    assert (s.seed, s.preset, s.train.patch) == (9, "paper", (32, 32, 4))
    s = load_settings(path, overrides={"seed": 11, "preset": None}, environ={"AHNET_SEED": "9"})
    assert (s.seed, s.preset) == (11, "paper")


def test_value_types_follow_the_defaults(tmp_path):
    path = tmp_path / "ahnet.env"
    path.write_text("\n".join([
        "AHNET_TRAIN_JOINT=false",
        "AHNET_TRAIN_LR_DECODER=0.002",
        "AHNET_TRAIN_CLASS_WEIGHTS=1,8",
        "AHNET_TRAIN_INTENSITY_RANGE=-100,300",
        "AHNET_EVAL_RADIUS=3,3,1",
        "AHNET_TASK=segmentation",
    ]) + "\n")
    s = load_settings(path, environ={})
    assert s.train.joint is False
    assert s.train.lr_decoder == 0.002
    assert s.train.class_weights == (1.0, 8.0)
    assert s.train.intensity_range == (-100.0, 300.0)
    assert s.eval.radius == (3, 3, 1)
    assert s.task == "segmentation"


def test_unknown_file_key_is_rejected(tmp_path):
    path = tmp_path / "ahnet.env"
    path.write_text("AHNET_TRAIN_PATCHES=1,2,3\n")
    with pytest.raises(ConfigError, match="AHNET_TRAIN_PATCHES"):
        load_settings(path, environ={})


def test_unknown_environment_key_is_only_a_warning(caplog):
    s = load_settings(environ={"AHNET_NOT_A_KEY": "1"})
    assert s == Settings()
    assert "AHNET_NOT_A_KEY" in caplog.text


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_settings(tmp_path / "nope.env", environ={})


def test_unknown_override_is_rejected():
    with pytest.raises(ConfigError):
        load_settings(overrides={"epochs": 3}, environ={})


@pytest.mark.parametrize("key,value", [
    ("AHNET_PRESET", "laptop"),
    ("AHNET_TASK", "classification"),
    ("AHNET_TRAIN_POSITIVE_FRACTION", "1.5"),
    ("AHNET_TRAIN_LR_JOINT", "0"),
    ("AHNET_TRAIN_BETA1", "1.0"),
    ("AHNET_TRAIN_PATCH", "64,0,8"),
    ("AHNET_TRAIN_PATCH", "128,64,8"),
    ("AHNET_TRAIN_JOINT", "maybe"),
    ("AHNET_TRAIN_BATCH_SIZE", "two"),
    ("AHNET_TRAIN_INTENSITY_RANGE", "1,2,3"),
    ("AHNET_BENCH_REPEATS", "2"),
])
def test_invalid_values_are_config_errors(key, value):
    with pytest.raises(ConfigError):
        load_settings(environ={key: value})


def test_every_section_field_has_a_key():
    assert KEYS["AHNET_TILING_STRIDE"] == ("tiling", "stride", (32, 32, 4))
    assert KEYS["AHNET_SEED"][0] is None
    assert len(KEYS) == len({k.lower() for k in KEYS})


def test_save_settings_echoes_resolved_values(tmp_path):
    path = save_settings(tmp_path / "run", load_settings(overrides={"seed": 4}, environ={}))
    doc = json.loads(path.read_text())
    assert doc["seed"] == 4
    assert doc["train"]["patch"] == [64, 64, 8]
