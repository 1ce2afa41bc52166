"""
Training objectives for AHNET
Gaussian heatmap targets, L2 / cross-entropy base losses, their focal
re-weighting and the Adam update.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from core import tensor as T
from utils import ConfigError, ShapeError, get_error_message

CLAMP_FLOOR = 1.0 + 1e-6
HEATMAP_MODES = ("unit-peak", "paper")
FOCAL_MODES = ("voxel", "batch")


# ============================================================
# DOMAIN TYPES
# ============================================================


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned lesion box: center (x,y,z) and extents (w,h,d) in voxels."""
    center: tuple
    extent: tuple

    def __post_init__(self):
        if len(self.center) != 3 or len(self.extent) != 3:
            raise ShapeError(f"Box3D needs 3 coordinates and 3 extents, got {self.center}, {self.extent}")
        if any(e <= 0 for e in self.extent):
            raise ShapeError(f"Box extents must be positive, got {self.extent}")

    def contains(self, point):
        """Closed containment |p - c| <= extent / 2 on every axis."""
        return all(abs(p - c) <= e / 2.0 for p, c, e in zip(point, self.center, self.extent))

    def inside(self, dims):
        return all(0 <= c <= d - 1 for c, d in zip(self.center, dims))

    def fits(self, dims):
        return all(c - e / 2.0 >= 0 and c + e / 2.0 <= d - 1
                   for c, e, d in zip(self.center, self.extent, dims))

    def shifted(self, offset):
        return Box3D(tuple(c - o for c, o in zip(self.center, offset)), self.extent)

    def to_dict(self, volume=None):
        entry = {"center": [float(c) for c in self.center], "extent": [float(e) for e in self.extent]}
        if volume is not None:
            entry = {"volume": volume, **entry}
        return entry


@dataclass(frozen=True)
class HeatmapSpec:
    k: float = 4.0
    mode: str = "unit-peak"

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigError(get_error_message('invalid_value', key="heatmap k", value=self.k, reason="must be > 0"))
        if self.mode not in HEATMAP_MODES:
            raise ConfigError(get_error_message('invalid_value', key="heatmap mode", value=self.mode,
                                                reason="expected unit-peak or paper"))


@dataclass(frozen=True)
class FocalSpec:
    gamma: float = 0.0
    d_max: float = 1e4
    scale: float = 1.0
    mode: str = "voxel"

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(get_error_message('invalid_value', key="gamma", value=self.gamma, reason="must be >= 0"))
        if not self.d_max > 1:
            raise ConfigError(get_error_message('invalid_value', key="d_max", value=self.d_max, reason="must be > 1"))
        if not self.scale > 0:
            raise ConfigError(get_error_message('invalid_value', key="focal scale", value=self.scale,
                                                reason="must be > 0"))
        if self.mode not in FOCAL_MODES:
            raise ConfigError(get_error_message('invalid_value', key="focal mode", value=self.mode,
                                                reason="expected voxel or batch"))


# ============================================================
# HEATMAPS
# ============================================================


def gaussian_heatmap(boxes, dims, spec=None):
    """Sum of per-box Gaussians with σ_axis = extent_axis / k, as an (X,Y,Z) float array."""
    spec = spec or HeatmapSpec()
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims, dtype=np.float64)
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    for box in boxes:
        if not box.inside(dims):
            raise ShapeError(f"Box centered at {box.center} lies outside volume {dims}")
        sigma = [e / spec.k for e in box.extent]
        if spec.mode == "paper":
            peak = 1.0 / math.sqrt((2.0 * math.pi) ** 3 * sigma[0] ** 2 * sigma[1] ** 2 * sigma[2] ** 2)
        else:
            peak = 1.0
        gx, gy, gz = (np.exp(-0.5 * ((a - c) / s) ** 2) for a, c, s in zip(axes, box.center, sigma))
        out += peak * gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    return out.astype(T.get_dtype())


# ============================================================
# REGRESSION LOSSES
# ============================================================


def _target(pred, target):
    t = np.asarray(getattr(target, "data", target), dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(get_error_message('shape_mismatch', a=pred.shape, b=t.shape))
    return t


def l2_loss(pred, target):
    """Mean squared difference."""
    diff = pred.data - _target(pred, target)
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)

    def backward(g):
        return ((2.0 / n) * g * diff,)

    return T.emit("l2", value, (pred,), backward)


def focal_weight(d, spec):
    """(ln D / ln D_max)^γ on D clamped to [1+1e-6, D_max]."""
    clamped = np.clip(d, CLAMP_FLOOR, spec.d_max)
    return (np.log(clamped) / math.log(spec.d_max)) ** spec.gamma


def focal_value(d, spec):
    """Scalar focal-L2 of a precomputed D (raw D is the multiplicand)."""
    return float(focal_weight(np.float64(d), spec) * d)


def _focal_weight_slope(d, spec):
    """d/dD of the weight; zero where the clamp is active."""
    active = (d > CLAMP_FLOOR) & (d < spec.d_max)
    clamped = np.clip(d, CLAMP_FLOOR, spec.d_max)
    ratio = np.log(clamped) / math.log(spec.d_max)
    slope = spec.gamma * ratio ** (spec.gamma - 1.0) / (clamped * math.log(spec.d_max)) if spec.gamma else 0.0
    return np.where(active, slope, 0.0)


def focal_l2(pred, target, spec):
    """Focal-weighted L2: easy voxels (small D) are down-weighted.

    voxel mode weights every squared error individually; batch mode weights
    the mean. γ=0 with unit scale is exactly l2_loss.
    """
    if spec.gamma == 0 and spec.scale == 1.0:
        return l2_loss(pred, target)
    e = (pred.data.astype(np.float64) - _target(pred, target)) * spec.scale
    n = e.size
    if spec.mode == "batch":
        d = float(np.mean(e * e))
        w = float(focal_weight(d, spec))
        value = w * d
        dF_dD = w + d * float(_focal_weight_slope(np.float64(d), spec))
        grad_e = dF_dD * 2.0 * e / n
    else:
        d = e * e
        w = focal_weight(d, spec)
        value = float(np.mean(w * d))
        dF_dd = w + d * _focal_weight_slope(d, spec)
        grad_e = dF_dd * 2.0 * e / n
    grad = (grad_e * spec.scale).astype(pred.data.dtype)

    def backward(g):
        return (g * grad,)

    return T.emit("focal_l2", np.asarray(value, dtype=pred.data.dtype), (pred,), backward)


# ============================================================
# CLASSIFICATION LOSSES
# ============================================================


def _log_softmax(logits, labels):
    z = logits.data.astype(np.float64)
    C = z.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(get_error_message('shape_mismatch', a=z.shape, b=labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ShapeError(f"Label values must lie in [0, {C - 1}]")
    m = z.max(axis=1, keepdims=True)
    logp = z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    logpt = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)[:, 0]
    return logp, logpt, onehot, labels.astype(np.int64)


def _voxel_weights(labels, class_weights):
    if class_weights is None:
        return np.ones(labels.shape, dtype=np.float64)
    return np.asarray(class_weights, dtype=np.float64)[labels]


def cross_entropy(logits, labels, class_weights=None):
    """Weighted mean negative log-likelihood of softmax(logits) over N×C×... maps."""
    logp, logpt, onehot, labels = _log_softmax(logits, labels)
    w = _voxel_weights(labels, class_weights)
    total = w.sum()
    value = float(np.sum(w * -logpt) / total)
    grad = ((np.exp(logp) - onehot) * (w / total)[:, None]).astype(logits.data.dtype)

    def backward(g):
        return (g * grad,)

    return T.emit("cross_entropy", np.asarray(value, dtype=logits.data.dtype), (logits,), backward)


def focal_ce(logits, labels, gamma, class_weights=None):
    """Weighted mean of -(1 - p_t)^γ ln p_t; γ=0 is exactly cross_entropy."""
    if gamma < 0:
        raise ConfigError(get_error_message('invalid_value', key="gamma", value=gamma, reason="must be >= 0"))
    if gamma == 0:
        return cross_entropy(logits, labels, class_weights)
    logp, logpt, onehot, labels = _log_softmax(logits, labels)
    w = _voxel_weights(labels, class_weights)
    total = w.sum()
    pt = np.exp(logpt)
    q = 1.0 - pt
    per_voxel = -(q ** gamma) * logpt
    value = float(np.sum(w * per_voxel) / total)
    with np.errstate(divide="ignore", invalid="ignore"):
        pull = np.where(q > 0, gamma * q ** (gamma - 1.0) * pt * logpt - q ** gamma, -(q ** gamma))
    dz = (onehot - np.exp(logp)) * pull[:, None]
    grad = (dz * (w / total)[:, None]).astype(logits.data.dtype)

    def backward(g):
        return (g * grad,)

    return T.emit("focal_ce", np.asarray(value, dtype=logits.data.dtype), (logits,), backward)


# ============================================================
# ADAM
# ============================================================


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: list


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(groups, state):
    """
    One bias-corrected Adam update over parameter groups, each with its own
    learning rate. Parameters without a gradient are left alone.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for group in groups:
        for name, p in group.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            state.m[name], state.v[name] = m, v
            p.assign(p.data - group.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return state


def zero_grads(params):
    for _, p in params:
        p.grad = None
