"""
Dense tensor engine for AHNET
Convolutions, anisotropic pooling, normalization, interpolation and the
reverse-mode gradient tape for exactly the op set the networks use.

Activations are N×C×H×W in 2D and N×C×H×W×D in 3D (depth last).
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import ConfigError, ShapeError, TapeError, get_error_message

# ============================================================
# PRECISION
# ============================================================

_precision = {"dtype": np.float32}
_local = threading.local()


def get_dtype():
    return _precision["dtype"]


def set_precision(name):
    """Switch the engine between float32 (default) and float64 (verification mode)."""
    if name not in ("float32", "float64"):
        raise ConfigError(get_error_message('invalid_value', key="precision", value=name,
                                            reason="expected float32 or float64"))
    _precision["dtype"] = np.float32 if name == "float32" else np.float64


@contextmanager
def precision(name):
    previous = "float64" if get_dtype() is np.float64 else "float32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


# ============================================================
# TENSOR
# ============================================================


class Tensor:
    """A dense array with an optional gradient buffer.

    Parameters are updated through assign(), which bumps the version so a
    tape recorded against the old values refuses to replay.
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=get_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.version = 0

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def assign(self, value):
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(get_error_message('shape_mismatch', a=value.shape, b=self.data.shape))
        self.data = np.ascontiguousarray(value)
        self.version += 1

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(get_error_message('loss_not_scalar', shape=self.data.shape))
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype.name})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


# ============================================================
# GRADIENT TAPE
# ============================================================


class TapeRecord:
    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.versions = tuple(t.version for t in inputs)


class GradTape:
    """Ordered record of executed ops; backward() replays it in reverse.

    Usage:
        with GradTape() as tape:
            loss = l2_loss(forward(model, x, mode="train"), target)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    @staticmethod
    def current():
        stack = _tape_stack()
        return stack[-1] if stack else None

    def record(self, op, inputs, output, backward):
        self.records.append(TapeRecord(op, inputs, output, backward))

    def backward(self, loss):
        """Populate .grad on every leaf reachable from loss; returns {name: grad}."""
        if loss.size != 1:
            raise TapeError(get_error_message('loss_not_scalar', shape=loss.shape))
        if not any(rec.output is loss for rec in self.records):
            raise TapeError(get_error_message('loss_not_on_tape'))
        for rec in self.records:
            for t, v in zip(rec.inputs, rec.versions):
                if t.version != v:
                    raise TapeError(get_error_message('mutated_parameter', name=t.name or repr(t)))

        produced = {id(rec.output) for rec in self.records}
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t

        named = {}
        for key, t in leaves.items():
            t.grad = grads[key].astype(t.data.dtype, copy=False)
            if t.name is not None:
                named[t.name] = t.grad
        return named


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _emit(op, data, inputs, backward):
    out = Tensor(data)
    tape = GradTape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


# ============================================================
# CONVOLUTION
# ============================================================


@dataclass(frozen=True)
class ConvSpec:
    """Conv K_x × K_y [× K_z] / (S_x, S_y [, S_z]) with zero padding."""
    kernel: tuple
    stride: tuple
    padding: tuple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if not (len(self.kernel) == len(self.stride) == len(self.padding)):
            raise ShapeError(f"ConvSpec axes disagree: {self.kernel}, {self.stride}, {self.padding}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ShapeError(f"Kernel extents and strides must be >= 1: {self.kernel}, {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"Padding must be >= 0: {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("Channel counts must be >= 1")

    @classmethod
    def for_weight(cls, weight_shape, stride=1, padding="same"):
        rank = len(weight_shape) - 2
        kernel = tuple(int(k) for k in weight_shape[2:])
        return cls(kernel=kernel,
                   stride=_per_axis(stride, rank),
                   padding=_resolve_padding(padding, kernel),
                   in_channels=int(weight_shape[1]),
                   out_channels=int(weight_shape[0]))


def _per_axis(value, rank):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ShapeError(f"Expected {rank} per-axis values, got {value}")
    return value


def _resolve_padding(padding, kernel):
    if padding == "same":
        return tuple(k // 2 for k in kernel)
    return _per_axis(padding, len(kernel))


def _out_extent(extent, k, s, p, axis):
    out = (extent + 2 * p - k) // s + 1
    if extent + 2 * p < k or out < 1:
        raise ShapeError(get_error_message('empty_output', axis=axis, extent=out))
    return out


def _im2col(x, kernel, stride, pad):
    """(N,C,H,W) -> (N, Ho*Wo, C*kh*kw), columns ordered channel, row, column."""
    N, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    Ho = _out_extent(H, kh, sh, ph, 0)
    Wo = _out_extent(W, kw, sw, pw, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N, Ho * Wo, C * kh * kw)
    return np.ascontiguousarray(cols), (Ho, Wo)


def _col2im(gcols, x_shape, kernel, stride, pad, out_hw):
    N, C, H, W = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    Ho, Wo = out_hw
    g = gcols.reshape(N, Ho, Wo, C, kh, kw)
    gxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=gcols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            gxp[:, :, dy:dy + sh * (Ho - 1) + 1:sh, dx:dx + sw * (Wo - 1) + 1:sw] += \
                g[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return gxp[:, :, ph:ph + H, pw:pw + W]


def _conv2d_forward(x, w, stride, pad):
    """Every sample is one matrix product of identical shape, so a slice gives
    the same bits whether it is convolved alone or inside a larger batch."""
    n = w.shape[0]
    cols, (Ho, Wo) = _im2col(x, w.shape[2:], stride, pad)
    wmat = np.ascontiguousarray(w.reshape(n, -1).T)
    out = np.empty((x.shape[0], Ho * Wo, n), dtype=x.dtype)
    for i in range(x.shape[0]):
        np.matmul(cols[i], wmat, out=out[i])
    out = out.transpose(0, 2, 1).reshape(x.shape[0], n, Ho, Wo)
    return np.ascontiguousarray(out), cols, (Ho, Wo)


def _conv2d_backward(g, x_shape, w, cols, stride, pad, out_hw):
    N = x_shape[0]
    n = w.shape[0]
    Ho, Wo = out_hw
    gmat = np.ascontiguousarray(g.reshape(N, n, Ho * Wo).transpose(0, 2, 1))
    gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    gcols = np.matmul(gmat, w.reshape(n, -1))
    gx = _col2im(gcols, x_shape, w.shape[2:], stride, pad, out_hw)
    return gx, gw


def _depth_unfold(x, kd, sd, pd):
    """(N,C,H,W,D) -> (N*Do, C*kd, H, W): depth taps become extra channels."""
    N, C, H, W, D = x.shape
    Do = _out_extent(D, kd, sd, pd, 2)
    xp = np.pad(x, ((0, 0),) * 4 + ((pd, pd),)) if pd else x
    taps = [xp[..., t:t + sd * (Do - 1) + 1:sd] for t in range(kd)]
    stacked = np.stack(taps, axis=2)
    return stacked.transpose(0, 5, 1, 2, 3, 4).reshape(N * Do, C * kd, H, W), Do


def _depth_fold(g, x_shape, kd, sd, pd, Do):
    N, C, H, W, D = x_shape
    g = g.reshape(N, Do, C, kd, H, W).transpose(0, 2, 3, 4, 5, 1)
    gxp = np.zeros((N, C, H, W, D + 2 * pd), dtype=g.dtype)
    for t in range(kd):
        gxp[..., t:t + sd * (Do - 1) + 1:sd] += g[:, :, t]
    return gxp[..., pd:pd + D]


def _check_conv(x, weight, rank):
    if x.ndim != rank + 2 or weight.ndim != rank + 2:
        raise ShapeError(f"conv{rank}d expects rank-{rank + 2} input and weight, "
                         f"got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(get_error_message('channel_mismatch', got=x.shape[1], expected=weight.shape[1]))


def _bias_view(bias, rank):
    return bias.data.reshape((1, -1) + (1,) * rank)


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """Zero-padded strided cross-correlation over H and W."""
    _check_conv(x, weight, 2)
    spec = ConvSpec.for_weight(weight.shape, stride, padding)
    out, cols, out_hw = _conv2d_forward(x.data, weight.data, spec.stride, spec.padding)
    if bias is not None:
        out += _bias_view(bias, 2)
    x_shape = x.shape

    def backward(g):
        gx, gw = _conv2d_backward(g, x_shape, weight.data, cols, spec.stride, spec.padding, out_hw)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv2d", out, inputs, backward)


def conv3d(x, weight, bias=None, stride=1, padding="same"):
    """Zero-padded strided cross-correlation over H, W and D.

    Depth taps are unfolded into channels and the 2D kernel does the work;
    with a depth-1 kernel and unit depth stride the result for slice k is
    bitwise the conv2d of slice k.
    """
    _check_conv(x, weight, 3)
    spec = ConvSpec.for_weight(weight.shape, stride, padding)
    (kh, kw, kd), (sh, sw, sd), (ph, pw, pd) = spec.kernel, spec.stride, spec.padding
    N, n = x.shape[0], weight.shape[0]
    unfolded, Do = _depth_unfold(x.data, kd, sd, pd)
    w2 = np.ascontiguousarray(weight.data.transpose(0, 1, 4, 2, 3).reshape(n, -1, kh, kw))
    out2, cols, out_hw = _conv2d_forward(unfolded, w2, (sh, sw), (ph, pw))
    out = out2.reshape((N, Do, n) + out_hw).transpose(0, 2, 3, 4, 1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += _bias_view(bias, 3)
    x_shape = x.shape
    unfolded_shape = unfolded.shape

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 4, 1, 2, 3)).reshape((N * Do, n) + out_hw)
        gu, gw2 = _conv2d_backward(g2, unfolded_shape, w2, cols, (sh, sw), (ph, pw), out_hw)
        gx = _depth_fold(gu, x_shape, kd, sd, pd, Do)
        gw = gw2.reshape(n, -1, kd, kh, kw).transpose(0, 1, 3, 4, 2)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv3d", out, inputs, backward)


def conv(x, weight, bias=None, stride=1, padding="same"):
    """Dispatch on spatial rank."""
    if x.ndim == 4:
        return conv2d(x, weight, bias, stride, padding)
    return conv3d(x, weight, bias, stride, padding)


# ============================================================
# POOLING
# ============================================================


def maxpool(x, kernel, stride=None, padding=0):
    """Windowed maximum; padding cells hold -inf and never win."""
    rank = x.ndim - 2
    kernel = _per_axis(kernel, rank)
    stride = kernel if stride is None else _per_axis(stride, rank)
    padding = _per_axis(padding, rank)
    for k, p in zip(kernel, padding):
        if p >= k:
            raise ShapeError(f"Pool padding {padding} must be smaller than the window {kernel}")
    for a, (extent, k, p) in enumerate(zip(x.shape[2:], kernel, padding)):
        if extent + 2 * p < k:
            raise ShapeError(get_error_message('kernel_too_large', kernel=kernel, extent=x.shape[2:]))

    data = x.data
    if any(padding):
        data = np.pad(data, ((0, 0), (0, 0)) + tuple((p, p) for p in padding),
                      constant_values=-np.inf)
    spatial_axes = tuple(range(2, 2 + rank))
    win = sliding_window_view(data, kernel, axis=spatial_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_shape = win.shape[:2 + rank]
    flat = win.reshape(out_shape + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    padded_shape = data.shape
    x_shape = x.shape

    def backward(g):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for t, offset in enumerate(np.ndindex(*kernel)):
            region = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape[2:]))
            gxp[region] += np.where(arg == t, g, 0)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x_shape[2:]))
        return (gxp[crop],)

    return _emit("maxpool", np.ascontiguousarray(out), (x,), backward)


# ============================================================
# NORMALIZATION
# ============================================================


def batchnorm(x, scale, shift, running_mean, running_var, mode="infer", momentum=0.1, eps=1e-5):
    """Per-channel normalization.

    train: batch statistics, running buffers updated in place with momentum.
    infer: running statistics.
    """
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,) or running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"batchnorm parameters must have length {C}")
    rank = x.ndim - 2
    axes = (0,) + tuple(range(2, 2 + rank))
    bshape = (1, C) + (1,) * rank
    data = x.data

    if mode == "train":
        count = data.size // C if C else 0
        if x.shape[0] == 0 or count == 0:
            raise ShapeError("batchnorm in train mode needs a non-empty batch and spatial extent")
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        inv = (1.0 / np.sqrt(var + eps)).astype(data.dtype)
        xhat = (data - mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * unbiased

        def backward(g):
            gscale = (g * xhat).sum(axis=axes)
            gshift = g.sum(axis=axes)
            gxhat = g * scale.data.reshape(bshape)
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, gscale, gshift
    else:
        std_inv = (1.0 / np.sqrt(running_var + eps)).astype(data.dtype)
        inv = scale.data * std_inv
        centered = data - running_mean.astype(data.dtype).reshape(bshape)
        out = centered * inv.reshape(bshape) + shift.data.reshape(bshape)

        def backward(g):
            gx = g * inv.reshape(bshape)
            gscale = (g * centered * std_inv.reshape(bshape)).sum(axis=axes)
            gshift = g.sum(axis=axes)
            return gx, gscale, gshift

    return _emit("batchnorm", out, (x, scale, shift), backward)


# ============================================================
# INTERPOLATION
# ============================================================


def _interp_axis(n_in, n_out):
    """Align-corners sample positions: index pairs and the weight of the upper one."""
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def upsample_linear(x, size):
    """Separable (bi/tri)linear interpolation to the target spatial extents."""
    rank = x.ndim - 2
    size = tuple(int(s) for s in size)
    if len(size) != rank or any(s < 1 for s in size):
        raise ShapeError(f"Target extents {size} do not fit a rank-{rank} input")
    data = x.data
    plans = []
    for a, n_out in enumerate(size):
        axis = 2 + a
        n_in = data.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, w = _interp_axis(n_in, n_out)
        wshape = [1] * data.ndim
        wshape[axis] = n_out
        lo = np.take(data, i0, axis=axis)
        hi = np.take(data, i1, axis=axis)
        data = lo + w.astype(data.dtype).reshape(wshape) * (hi - lo)
        plans.append((axis, n_in, i0, i1, w))

    def backward(g):
        for axis, n_in, i0, i1, w in reversed(plans):
            m = np.zeros((len(i0), n_in), dtype=g.dtype)
            rows = np.arange(len(i0))
            np.add.at(m, (rows, i0), (1.0 - w).astype(g.dtype))
            np.add.at(m, (rows, i1), w.astype(g.dtype))
            g = np.moveaxis(np.tensordot(g, m, axes=([axis], [0])), -1, axis)
        return (g,)

    return _emit("upsample_linear", np.ascontiguousarray(data), (x,), backward)


# ============================================================
# ELEMENTWISE, CONCATENATION, REDUCTIONS
# ============================================================


def relu(x):
    data = x.data
    out = np.maximum(data, 0)

    def backward(g):
        return (g * (data > 0),)

    return _emit("relu", out, (x,), backward)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(get_error_message('shape_mismatch', a=a.shape, b=b.shape))

    def backward(g):
        return g, g

    return _emit("add", a.data + b.data, (a, b), backward)


def concat(tensors):
    """Channel-axis concatenation preserving argument order."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(get_error_message('shape_mismatch', a=ref, b=t.shape))
    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def mul_scalar(x, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit("mul_scalar", x.data * c, (x,), backward)


def sum_all(x):
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def mean_all(x):
    shape = x.shape
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, shape).astype(x.data.dtype),)

    return _emit("mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward)


def emit(op, data, inputs, backward):
    """Public hook for composite ops (the losses) that supply their own adjoint."""
    return _emit(op, data, tuple(inputs), backward)


# ============================================================
# FINITE DIFFERENCES
# ============================================================


def finite_difference_check(fn, tensors, eps=None, max_checks=24, rng=None):
    """
    Compare tape gradients of the scalar fn() with central differences.
    Returns the largest |analytic - numeric| divided by the largest |numeric|
    over the checked entries.
    """
    eps = eps if eps is not None else (1e-3 if get_dtype() is np.float32 else 1e-6)
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst, scale = 0.0, 0.0
    for t, a in zip(tensors, analytic):
        flat_count = t.data.size
        picks = rng.choice(flat_count, size=min(max_checks, flat_count), replace=False)
        for idx in picks:
            pos = np.unravel_index(idx, t.shape)
            original = t.data[pos].item()
            t.data[pos] = original + eps
            up = float(fn().item())
            t.data[pos] = original - eps
            down = float(fn().item())
            t.data[pos] = original
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(float(a[pos]) - numeric))
            scale = max(scale, abs(numeric))
    return worst / max(scale, 1e-12) if not math.isnan(worst) else math.inf
