"""
Utility functions for AHNET
Run audit logging, the error hierarchy, validation and formatting helpers
"""

import json
import logging
import math
import threading
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger("ahnet")

# ============================================================
# ERRORS
# ============================================================


class AhnetError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ShapeError(AhnetError):
    pass


class TapeError(AhnetError):
    pass


class GraphError(AhnetError):
    pass


class ConfigError(AhnetError):
    pass


class TransferError(AhnetError):
    pass


class EquivalenceError(TransferError):
    """Raised when a transferred encoder does not reproduce the 2D features.

    The offending TransferReport is attached so callers can inspect every layer.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EvaluationError(AhnetError):
    pass


class CheckpointError(AhnetError):
    pass


class VolumeFormatError(AhnetError):
    pass


class SamplingError(AhnetError):
    pass


class TrainingDivergedError(AhnetError):
    pass


# ============================================================
# ERROR MESSAGES
# ============================================================

ERROR_MESSAGES = {
    'channel_mismatch': 'Input has {got} channels but the weight expects {expected}',
    'empty_output': 'Output extent along axis {axis} would be {extent}; check kernel, stride and padding',
    'shape_mismatch': 'Shapes {a} and {b} do not match',
    'kernel_too_large': 'Pooling window {kernel} does not fit input extents {extent}',
    'loss_not_scalar': 'backward() needs a scalar loss, got shape {shape}',
    'loss_not_on_tape': 'The loss was not produced while this tape was recording',
    'mutated_parameter': 'Parameter {name} changed after it was recorded on the tape',
    'unmapped_parameters': 'unmapped parameters: {names}',
    'bad_magic': 'bad magic in {path}',
    'truncated': '{path} is truncated: expected {expected} bytes, found {found}',
    'invalid_preset': 'Unknown preset {value!r}; expected "paper" or "desk"',
    'invalid_value': 'Invalid value for {key}: {value!r} ({reason})',
    'unknown_key': 'Unknown configuration key {key}',
    'missing_artifacts': 'Missing artifacts: {names}',
    'no_lesions': 'FROC needs at least one annotated lesion',
    'no_positives': 'Dataset has no lesions but positive fraction is {fraction}',
    'diverged': 'Loss became non-finite at epoch {epoch}, step {step} ({value})',
}


def get_error_message(error_key, default="An error occurred", **values):
    """
    Get a user-facing error message by key, filled with values
    """
    template = ERROR_MESSAGES.get(error_key)
    if template is None:
        return default
    return template.format(**values)


# ============================================================
# RUN AUDIT LOG
# ============================================================

_run_log_path = None
_run_log_lock = threading.Lock()


def set_run_log(run_dir):
    """Direct log_event() records to <run_dir>/run_log.jsonl (None disables)."""
    global _run_log_path
    if run_dir is None:
        _run_log_path = None
        return
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _run_log_path = run_dir / "run_log.jsonl"


def log_event(action, stage=None, step=None, details=None):
    """
    Append an audit entry for a significant pipeline action
    Entries are append-only; a failing write never interrupts the run
    """
    if _run_log_path is None:
        return
    entry = {
        "time": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "action": action,
        "stage": stage,
        "step": step,
        "details": details,
    }
    line = json.dumps(entry, sort_keys=True, default=_json_default) + "\n"
    try:
        with _run_log_lock, open(_run_log_path, "a", encoding="utf-8") as fh:
            fh.write(line)
    except OSError as e:
        logger.warning("Run log error: %s", e)


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return str(value)


# ============================================================
# VALIDATION FUNCTIONS
# ============================================================


def validate_extents(values, minimum=1, what="extent"):
    """
    Validate that every entry is an integer >= minimum
    Returns the values as a tuple of ints
    """
    values = tuple(values)
    for v in values:
        if int(v) != v or v < minimum:
            raise ShapeError(f"Every {what} must be an integer >= {minimum}, got {values}")
    return tuple(int(v) for v in values)


def validate_fraction(value, key):
    if not (0.0 <= value <= 1.0):
        raise ConfigError(get_error_message('invalid_value', key=key, value=value,
                                            reason="must lie in [0, 1]"))
    return float(value)


def validate_positive(value, key):
    if not value > 0 or not math.isfinite(value):
        raise ConfigError(get_error_message('invalid_value', key=key, value=value,
                                            reason="must be positive"))
    return value


def parse_int_list(text, key):
    """Parse "64,64,8" style values from the config file"""
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigError(get_error_message('invalid_value', key=key, value=text,
                                            reason="expected comma separated integers"))


def parse_float_list(text, key):
    try:
        return tuple(float(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigError(get_error_message('invalid_value', key=key, value=text,
                                            reason="expected comma separated numbers"))


def parse_bool(text, key):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(get_error_message('invalid_value', key=key, value=text,
                                        reason="expected true or false"))


# ============================================================
# FORMATTING HELPERS
# ============================================================


def format_shape(shape):
    """Format a shape as 1×3×64×64"""
    return "×".join(str(int(s)) for s in shape)


def format_ms(seconds):
    return f"{seconds * 1000.0:.2f} ms"


def format_count(value):
    return f"{int(value):,}"
