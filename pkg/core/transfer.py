"""
2D -> 3D weight transfer for AHNET
Permutation / unit-depth transforms on weight tensors, the downsampling
rewrite, encoder lifting, rule maps and the slice-equivalence validator.
"""

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from core.graph import Layer, run_graph
from store import Checkpoint
from utils import (TransferError, EquivalenceError, ConfigError, get_error_message,
                   format_shape, log_event)

logger = logging.getLogger("ahnet.transfer")

RULE_KINDS = ("input-conv", "append-depth", "copy", "downsample-rewrite")
ENCODER_PREFIXES = ("stem.", "stage")
DEFAULT_TOLERANCE = 1e-5


def is_encoder_name(name):
    return name.startswith(ENCODER_PREFIXES)


def is_encoder_layer(layer):
    return is_encoder_name(layer.name)


@dataclass(frozen=True)
class TransferRule:
    source: str
    target: str
    kind: str

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ConfigError(get_error_message('invalid_value', key="rule kind", value=self.kind,
                                                reason=f"expected one of {', '.join(RULE_KINDS)}"))


# ============================================================
# WEIGHT TRANSFORMS
# ============================================================


def _array(w):
    return np.asarray(getattr(w, "data", w))


def transform_input_layer(w2d):
    """(n,3,h,w) -> (n,1,h,w,3) with out[o,0,y,x,c] = in[o,c,y,x]."""
    w = _array(w2d)
    if w.ndim != 4:
        raise TransferError(f"Input-layer transform needs a rank-4 weight, got {format_shape(w.shape)}")
    if w.shape[1] != 3:
        raise TransferError(f"Input-layer transform needs 3 input channels, got {w.shape[1]}")
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)[:, None])


def inverse_input_layer(w3d):
    w = _array(w3d)
    if w.ndim != 5 or w.shape[1] != 1 or w.shape[4] != 3:
        raise TransferError(f"Not a transformed input layer: {format_shape(w.shape)}")
    return np.ascontiguousarray(w[:, 0].transpose(0, 3, 1, 2))


def append_depth(w2d):
    """(n,m,k,k) -> (n,m,k,k,1) for k in {1, 3}; data untouched."""
    w = _array(w2d)
    if w.ndim != 4:
        raise TransferError(f"Depth append needs a rank-4 weight, got {format_shape(w.shape)}")
    if w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise TransferError(f"Depth append accepts 1×1 and 3×3 kernels, got {format_shape(w.shape[2:])}")
    return np.ascontiguousarray(w[..., None])


def remove_depth(w3d):
    w = _array(w3d)
    if w.ndim != 5 or w.shape[4] != 1:
        raise TransferError(f"Not a depth-appended weight: {format_shape(w.shape)}")
    return np.ascontiguousarray(w[..., 0])


def apply_rule(kind, value):
    if kind == "input-conv":
        return transform_input_layer(value)
    if kind in ("append-depth", "downsample-rewrite"):
        return append_depth(value)
    return np.array(value, copy=True)


# ============================================================
# LAYER REWRITES
# ============================================================


def _is_stem_conv(layer):
    return layer.kind == "conv" and layer.inputs == ("input",)


def _is_boundary_conv(layer):
    a = layer.attrs
    return layer.kind == "conv" and tuple(a["kernel"]) == (1, 1) and tuple(a["stride"]) == (2, 2)


def _is_stem_pool(layer):
    return layer.kind == "maxpool" and len(layer.attrs["kernel"]) == 2 and max(layer.attrs["stride"]) > 1


def _slice_fuse(name, source, layer, optional):
    return Layer(name, "maxpool", (source,),
                 {"kernel": (1, 1, 2), "stride": (1, 1, 2), "padding": (0, 0, 0), "fuse_slices": True},
                 module=layer.module, role=layer.role, optional=optional)


def rewrite_downsample(layers):
    """
    Stem conv          -> Conv 7×7×3 / (2,2,1)
    Stem pool          -> MaxPool 1×1×2 / (1,1,2), MaxPool 3×3×3 / (2,2,2)
    Conv 1×1 / (2,2)   -> Conv 1×1×1 / (2,2,1), MaxPool 1×1×2 / (1,1,2)
    """
    out = []
    for layer in layers:
        a = layer.attrs
        if _is_stem_conv(layer):
            if a["in_channels"] != 3:
                raise TransferError(f"{layer.name}: stem must read 3 slices, reads {a['in_channels']}")
            out.append(layer.renamed(in_channels=1, kernel=tuple(a["kernel"]) + (3,),
                                     stride=tuple(a["stride"]) + (1,), padding=tuple(a["padding"]) + (1,)))
        elif _is_stem_pool(layer):
            base = layer.name.rsplit(".", 1)[0]
            fuse = _slice_fuse(f"{base}.zpool", layer.inputs[0], layer, optional=False)
            out.append(fuse)
            out.append(layer.renamed(inputs=(fuse.name,), kernel=tuple(a["kernel"]) + (3,),
                                     stride=tuple(a["stride"]) + (2,), padding=tuple(a["padding"]) + (1,)))
        elif _is_boundary_conv(layer):
            conv = layer.renamed(kernel=(1, 1, 1), stride=tuple(a["stride"]) + (1,), padding=(0, 0, 0))
            out.append(conv)
            out.append(_slice_fuse(f"{layer.name}_zpool", conv.name, layer, optional=True))
        else:
            raise TransferError(f"{layer.name} is not a downsampling boundary")
    return out


def _depth_one(layer):
    a = layer.attrs
    k = tuple(a["kernel"])
    if k[0] != k[1] or k[0] not in (1, 3) or tuple(a["stride"]) != (1, 1):
        raise TransferError(f"{layer.name}: no depth-append rule for Conv {format_shape(k)} / {a['stride']}")
    return layer.renamed(kernel=k + (1,), stride=(1, 1, 1), padding=tuple(a["padding"]) + (0,))


def lift_encoder(layers):
    """2D encoder layer specs -> 3D specs; layer names are kept so parameter names line up."""
    lifted = []
    remap = {}
    for layer in layers:
        if not is_encoder_layer(layer):
            continue
        layer = layer.renamed(inputs=[remap.get(n, n) for n in layer.inputs])
        if _is_stem_conv(layer) or _is_stem_pool(layer) or _is_boundary_conv(layer):
            seq = rewrite_downsample([layer])
        elif layer.kind == "conv":
            seq = [_depth_one(layer)]
        elif layer.kind == "maxpool":
            raise TransferError(f"{layer.name}: unexpected pooling layer inside the encoder")
        else:
            seq = [layer]
        lifted.extend(seq)
        remap[layer.name] = seq[-1].name
    return lifted


# ============================================================
# TRANSFER MAPS
# ============================================================


def build_transfer_map(layers):
    """Rules derived from layer-name conventions for every encoder parameter and buffer."""
    rules = []
    for layer in layers:
        if not is_encoder_layer(layer):
            continue
        if layer.kind == "conv":
            if _is_stem_conv(layer):
                kind = "input-conv"
            elif _is_boundary_conv(layer):
                kind = "downsample-rewrite"
            else:
                kind = "append-depth"
            rules.append(TransferRule(f"{layer.name}.weight", f"{layer.name}.weight", kind))
            if layer.attrs.get("bias"):
                rules.append(TransferRule(f"{layer.name}.bias", f"{layer.name}.bias", "copy"))
        elif layer.kind == "bn":
            for suffix in ("scale", "shift", "running_mean", "running_var"):
                rules.append(TransferRule(f"{layer.name}.{suffix}", f"{layer.name}.{suffix}", "copy"))
    return rules


def load_rule_overrides(path, rules):
    """Merge a JSON list of {source, target, kind} over rules (matched by source)."""
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read transfer overrides {path}: {e}")
    if not isinstance(entries, list):
        raise ConfigError(f"Transfer overrides in {path} must be a JSON list")
    merged = {rule.source: rule for rule in rules}
    for entry in entries:
        try:
            rule = TransferRule(entry["source"], entry["target"], entry["kind"])
        except (KeyError, TypeError):
            raise ConfigError(f"Override entry {entry!r} needs source, target and kind")
        merged[rule.source] = rule
    return list(merged.values())


def rules_to_json(rules):
    return json.dumps([asdict(r) for r in rules], indent=2)


def transfer_encoder(ckpt2d, rules, target_names=None):
    """
    Produce the 3D encoder checkpoint. Every 2D encoder tensor must match
    exactly one rule; decoder tensors must not appear in the map.
    """
    tensors = ckpt2d.tensors
    by_source = {}
    for rule in rules:
        if rule.source in by_source:
            raise TransferError(f"Parameter {rule.source} is matched by more than one rule")
        if not is_encoder_name(rule.source):
            raise TransferError(f"Rule for {rule.source} targets the 2D decoder, which is not transferred")
        if rule.source not in tensors:
            raise TransferError(f"Rule source {rule.source} is not in the 2D checkpoint")
        by_source[rule.source] = rule

    encoder_names = [n for n in tensors if is_encoder_name(n)]
    unmapped = [n for n in encoder_names if n not in by_source]
    if unmapped or not encoder_names:
        shown = ", ".join(unmapped[:6]) + (" ..." if len(unmapped) > 6 else "")
        raise TransferError(get_error_message('unmapped_parameters', names=shown or "(none)"))

    out = {}
    for name in encoder_names:
        rule = by_source[name]
        if rule.target in out:
            raise TransferError(f"Two rules write {rule.target}")
        try:
            out[rule.target] = apply_rule(rule.kind, tensors[name])
        except TransferError as e:
            raise TransferError(f"{name} ({rule.kind}): {e}") from e

    random_init = sorted(set(target_names or ()) - set(out))
    return Checkpoint(out, meta={"random_init": random_init})


# ============================================================
# REPORTS
# ============================================================


@dataclass
class TransferReport:
    layers: list = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def max_residual(self):
        values = [e["residual"] for e in self.layers if e.get("residual") is not None]
        return max(values) if values else 0.0

    @property
    def failures(self):
        return [e["layer"] for e in self.layers
                if e.get("residual") is not None and e["residual"] > self.tolerance]

    @property
    def first_failure(self):
        failures = self.failures
        return failures[0] if failures else None

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        return {"tolerance": self.tolerance, "max_residual": self.max_residual,
                "failures": self.failures, "layers": self.layers}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def describe_transfer(rules, source, target):
    """Per-tensor source shape, target shape and rule for a completed transfer."""
    report = TransferReport()
    for rule in rules:
        report.layers.append({
            "layer": rule.target,
            "rule": rule.kind,
            "source_shape": list(source.tensors[rule.source].shape),
            "target_shape": list(target.tensors[rule.target].shape),
            "residual": None,
        })
    return report


def audit_index_identities(source, target, rules):
    """Names whose transferred values break the transform index identity."""
    bad = []
    for rule in rules:
        if rule.kind == "input-conv":
            ok = np.array_equal(inverse_input_layer(target.tensors[rule.target]), source.tensors[rule.source])
        elif rule.kind in ("append-depth", "downsample-rewrite"):
            ok = np.array_equal(remove_depth(target.tensors[rule.target]), source.tensors[rule.source])
        else:
            ok = np.array_equal(target.tensors[rule.target], source.tensors[rule.source])
        if not ok:
            bad.append(rule.target)
    return bad


# ============================================================
# SLICE EQUIVALENCE
# ============================================================


def slice_triples(volume):
    """(X,Y,Z) -> (Z,3,X,Y) holding slices k-1, k, k+1 with zero slices past the ends."""
    v = np.asarray(volume)
    padded = np.pad(v, ((0, 0), (0, 0), (1, 1)))
    stacked = np.stack([padded[..., 0:-2], padded[..., 1:-1], padded[..., 2:]], axis=0)
    return np.ascontiguousarray(stacked.transpose(3, 0, 1, 2))


def _encoder_view(model):
    stage4 = model.taps.get("stage4")
    return model.subgraph(stage4) if stage4 else model


def validate_slice_equivalence(enc2d, enc3d, volume, tolerance=DEFAULT_TOLERANCE, strict=True):
    """
    Run the 2D encoder on every slice triple and the 3D encoder once with
    z-pooling disabled, then compare each shared layer slice by slice.
    """
    vol = np.asarray(volume)
    if vol.ndim == 5:
        vol = vol[0, 0]
    if vol.ndim != 3:
        raise TransferError(f"Validation volume must be X×Y×Z, got {format_shape(vol.shape)}")
    e2, e3 = _encoder_view(enc2d), _encoder_view(enc3d)
    rules = {r.source.rsplit(".", 1)[0]: r.kind for r in build_transfer_map(e2.layers) if r.source.endswith(".weight")}
    names = [layer.name for layer in e2.layers if e3.has_layer(layer.name)]

    _, acts2 = run_graph(e2, slice_triples(vol), mode="infer", collect=names)
    _, acts3 = run_graph(e3, vol[None, None], mode="infer", z_pooling=False, collect=names)

    report = TransferReport(tolerance=tolerance)
    for name in names:
        ref = acts2[name].data
        got = np.moveaxis(acts3[name].data[0], -1, 0)
        layer = e2.layer(name)
        entry = {"layer": name, "kind": layer.kind, "rule": rules.get(name)}
        if layer.kind == "conv":
            entry["source_shape"] = list(e2.params[f"{name}.weight"].shape)
            entry["target_shape"] = list(e3.params[f"{name}.weight"].shape)
        if got.shape != ref.shape:
            entry["residual"] = float("inf")
        else:
            diff = float(np.max(np.abs(got.astype(np.float64) - ref.astype(np.float64)))) if ref.size else 0.0
            scale = float(np.max(np.abs(ref))) if ref.size else 0.0
            entry["residual"] = diff / scale if scale > 0 else (0.0 if diff == 0 else float("inf"))
        report.layers.append(entry)

    log_event("equivalence_checked", stage="transfer",
              details={"layers": len(report.layers), "max_residual": report.max_residual,
                       "failures": report.failures[:5]})
    if not report.passed:
        logger.warning("Slice equivalence fails first at %s (max residual %.3g)",
                       report.first_failure, report.max_residual)
        if strict:
            raise EquivalenceError(f"Slice equivalence fails at {report.first_failure} "
                                   f"(residual {report.max_residual:.3g} > {tolerance:g})", report=report)
    return report
