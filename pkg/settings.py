"""
Configuration module for AHNET
Built-in defaults < config file (AHNET_* keys, dotenv syntax) < environment < command-line overrides
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path

from dotenv import dotenv_values

from utils import (ConfigError, ShapeError, get_error_message, parse_bool, parse_float_list, parse_int_list,
                   validate_fraction, validate_positive, validate_extents)

logger = logging.getLogger("ahnet.settings")

PREFIX = "AHNET_"
TASKS = ("detection", "segmentation")


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (96, 96, 24)
    spacing: tuple = (0.5, 0.5, 4.0)
    train_volumes: int = 40
    test_volumes: int = 10
    lesions_min: int = 1
    lesions_max: int = 3
    extent_xy: tuple = (8.0, 14.0)
    extent_z: tuple = (3.0, 5.0)
    contrast: float = 0.8
    texture: float = 0.25
    noise: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    patch: tuple = (64, 64, 8)
    positive_fraction: float = 0.7
    batch_size: int = 2
    lr_stage1: float = 0.0005
    lr_decoder: float = 0.001
    lr_joint: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 2.0
    d_max: float = 1e4
    focal_scale: float = 100.0
    focal_mode: str = "voxel"
    plateau_window: int = 3
    plateau_tolerance: float = 0.01
    epochs_stage1: int = 8
    epochs_stage2: int = 8
    epochs_joint: int = 2
    steps_per_epoch: int = 25
    joint: bool = True
    freeze_bn_stats: bool = True
    augment: bool = True
    rotation: float = 20.0
    scaling: float = 0.2
    mirror: bool = True
    heatmap_k: float = 4.0
    heatmap_mode: str = "unit-peak"
    class_weights: tuple = (1.0, 4.0)
    intensity_range: tuple = ()
    prefetch: int = 0


@dataclass(frozen=True)
class TilingConfig:
    tile: tuple = (64, 64, 8)
    stride: tuple = (32, 32, 4)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.1
    radius: tuple = (5, 5, 2)
    grid: tuple = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass(frozen=True)
class BenchConfig:
    dims: tuple = (64, 64, 16)
    repeats: int = 10
    warmup: int = 1


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    preset: str = "desk"
    out: str = "runs/desk"
    task: str = "detection"
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def run_dir(self):
        return Path(self.out)


SECTIONS = ("synth", "train", "tiling", "eval", "bench")
TOP_LEVEL = ("seed", "preset", "out", "task")


def _key_table():
    """AHNET_* key -> (section or None, field name, default value)."""
    table = {}
    defaults = Settings()
    for name in TOP_LEVEL:
        table[f"{PREFIX}{name.upper()}"] = (None, name, getattr(defaults, name))
    for section in SECTIONS:
        config = getattr(defaults, section)
        for f in fields(config):
            table[f"{PREFIX}{section.upper()}_{f.name.upper()}"] = (section, f.name, getattr(config, f.name))
    return table


KEYS = _key_table()


def _parse(key, text, default):
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            return parse_bool(text, key)
        if isinstance(default, tuple):
            if all(isinstance(v, int) for v in default) and default:
                return parse_int_list(text, key)
            return parse_float_list(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(get_error_message('invalid_value', key=key, value=text,
                                            reason=f"expected {type(default).__name__}"))
    return text


def _apply(settings, values):
    top = {}
    sections = {s: {} for s in SECTIONS}
    for key, text in values.items():
        section, name, default = KEYS[key]
        parsed = _parse(key, text, default)
        if section is None:
            top[name] = parsed
        else:
            sections[section][name] = parsed
    updated = {s: replace(getattr(settings, s), **v) for s, v in sections.items() if v}
    return replace(settings, **top, **updated)


def validate_settings(s):
    if s.preset not in ("paper", "desk"):
        raise ConfigError(get_error_message('invalid_preset', value=s.preset))
    if s.task not in TASKS:
        raise ConfigError(get_error_message('invalid_value', key="task", value=s.task,
                                            reason="expected detection or segmentation"))
    t = s.train
    validate_fraction(t.positive_fraction, "AHNET_TRAIN_POSITIVE_FRACTION")
    for key in ("lr_stage1", "lr_decoder", "lr_joint", "eps"):
        validate_positive(getattr(t, key), f"AHNET_TRAIN_{key.upper()}")
    if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1):
        raise ConfigError(get_error_message('invalid_value', key="AHNET_TRAIN_BETA1/BETA2",
                                            value=(t.beta1, t.beta2), reason="must lie in [0, 1)"))
    if t.batch_size < 1 or t.steps_per_epoch < 1 or t.plateau_window < 1:
        raise ConfigError(get_error_message('invalid_value', key="AHNET_TRAIN_BATCH_SIZE/STEPS_PER_EPOCH",
                                            value=(t.batch_size, t.steps_per_epoch), reason="must be >= 1"))
    if t.intensity_range and len(t.intensity_range) != 2:
        raise ConfigError(get_error_message('invalid_value', key="AHNET_TRAIN_INTENSITY_RANGE",
                                            value=t.intensity_range, reason="expected low,high"))
    for values, what in ((t.patch, "patch extent"), (s.tiling.tile, "tile extent"),
                         (s.tiling.stride, "tile stride"), (s.synth.dims, "volume extent")):
        try:
            validate_extents(values, what=what)
        except ShapeError as e:
            raise ConfigError(str(e))
    if any(p > d for p, d in zip(t.patch, s.synth.dims)):
        raise ConfigError(f"Patch {t.patch} does not fit volume dims {s.synth.dims}")
    if s.bench.repeats < 3:
        raise ConfigError(get_error_message('invalid_value', key="AHNET_BENCH_REPEATS",
                                            value=s.bench.repeats, reason="must be >= 3"))
    return s


def load_settings(path=None, overrides=None, environ=None):
    """
    Resolve settings from defaults, an optional config file, AHNET_* environment
    variables and explicit overrides such as {"seed": 3, "preset": "desk"}.
    """
    settings = Settings()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Config file {path} does not exist")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        unknown = sorted(k for k in file_values if k not in KEYS)
        if unknown:
            raise ConfigError(get_error_message('unknown_key', key=", ".join(unknown)))
        settings = _apply(settings, file_values)

    environ = os.environ if environ is None else environ
    env_values = {k: v for k, v in environ.items() if k.startswith(PREFIX)}
    for k in sorted(set(env_values) - set(KEYS)):
        logger.warning("Ignoring unknown environment variable %s", k)
    settings = _apply(settings, {k: v for k, v in env_values.items() if k in KEYS})

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for name in overrides:
        if name not in TOP_LEVEL:
            raise ConfigError(get_error_message('unknown_key', key=name))
    settings = replace(settings, **overrides)
    return validate_settings(settings)


def settings_to_dict(settings):
    return asdict(settings)


def save_settings(run_dir, settings):
    """Echo the resolved settings into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "settings.json"
    path.write_text(json.dumps(settings_to_dict(settings), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
