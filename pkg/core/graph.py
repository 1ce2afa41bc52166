"""
Model graphs for AHNET
Ordered layer specs, the named parameter store, build-time channel checks,
forward evaluation and the audit helpers (shape inference, JSON dump,
parameter and layer counts, structural signature).
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from core import tensor as T
from utils import GraphError, ShapeError, format_shape

logger = logging.getLogger("ahnet.graph")

LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "add", "concat", "upsample")
MODES = ("train", "infer")


@dataclass
class Layer:
    """One node of a ModelGraph.

    module/role tag the architectural unit the layer belongs to
    (e.g. module "stage2.block0", role "bottleneck"); optional layers are
    skipped by the structural audit.
    """
    name: str
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    module: str = ""
    role: str = ""
    optional: bool = False

    def renamed(self, name=None, inputs=None, **attrs):
        merged = dict(self.attrs)
        merged.update(attrs)
        return replace(self, name=name or self.name,
                       inputs=tuple(inputs) if inputs is not None else self.inputs,
                       attrs=merged)


# ============================================================
# MODEL GRAPH
# ============================================================


class ModelGraph:
    def __init__(self, rank, in_channels, name="model"):
        self.rank = rank
        self.in_channels = in_channels
        self.name = name
        self.layers = []
        self.params = {}
        self.buffers = {}
        self.channels = {"input": in_channels}
        self.taps = {}
        self.output = None
        self.stat_frozen = set()
        self.notes = {}
        self._index = {}

    def __repr__(self):
        return f"ModelGraph({self.name}, rank={self.rank}, layers={len(self.layers)})"

    def layer(self, name):
        try:
            return self.layers[self._index[name]]
        except KeyError:
            raise GraphError(f"No layer named {name} in {self.name}")

    def has_layer(self, name):
        return name in self._index

    def param_names(self, layer):
        if layer.kind == "conv":
            names = [f"{layer.name}.weight"]
            if layer.attrs.get("bias"):
                names.append(f"{layer.name}.bias")
            return names
        if layer.kind == "bn":
            return [f"{layer.name}.scale", f"{layer.name}.shift"]
        return []

    def buffer_names(self, layer):
        if layer.kind == "bn":
            return [f"{layer.name}.running_mean", f"{layer.name}.running_var"]
        return []

    def parameters(self, trainable=False):
        """(name, Tensor) pairs in layer order."""
        result = []
        for layer in self.layers:
            for pname in self.param_names(layer):
                p = self.params[pname]
                if not trainable or p.requires_grad:
                    result.append((pname, p))
        return result

    def state(self):
        """Every parameter and buffer as a name -> ndarray dict, in layer order."""
        tensors = {}
        for layer in self.layers:
            for pname in self.param_names(layer):
                tensors[pname] = self.params[pname].data
            for bname in self.buffer_names(layer):
                tensors[bname] = self.buffers[bname]
        return tensors

    def load_state(self, tensors, strict=True):
        """Copy arrays into the store; returns the names that were loaded."""
        loaded = []
        state_names = set(self.params) | set(self.buffers)
        unknown = sorted(set(tensors) - state_names)
        if strict and unknown:
            raise GraphError(f"Checkpoint holds tensors the model does not have: {', '.join(unknown[:8])}")
        for name, value in tensors.items():
            if name in self.params:
                target = self.params[name]
                if tuple(value.shape) != target.shape:
                    raise GraphError(f"{name}: checkpoint shape {format_shape(value.shape)} "
                                     f"does not match model shape {format_shape(target.shape)}")
                target.assign(value)
            elif name in self.buffers:
                target = self.buffers[name]
                if tuple(value.shape) != target.shape:
                    raise GraphError(f"{name}: checkpoint shape {format_shape(value.shape)} "
                                     f"does not match model shape {format_shape(target.shape)}")
                target[...] = value
            else:
                continue
            loaded.append(name)
        if strict:
            missing = sorted(state_names - set(loaded))
            if missing:
                raise GraphError(f"Checkpoint is missing tensors: {', '.join(missing[:8])}")
        return loaded

    def lock(self, predicate, freeze_bn_stats=True):
        """Stop gradients for layers matching predicate(layer); returns locked param names."""
        locked = []
        for layer in self.layers:
            if not predicate(layer):
                continue
            for pname in self.param_names(layer):
                self.params[pname].requires_grad = False
                locked.append(pname)
            if layer.kind == "bn" and freeze_bn_stats:
                self.stat_frozen.add(layer.name)
        return locked

    def unlock(self):
        for p in self.params.values():
            p.requires_grad = True
        self.stat_frozen.clear()

    def subgraph(self, output):
        """A view holding only the layers output depends on; parameters are shared."""
        needed = {output}
        for layer in reversed(self.layers):
            if layer.name in needed:
                needed.update(layer.inputs)
        view = ModelGraph(self.rank, self.in_channels, f"{self.name}[{output}]")
        for layer in self.layers:
            if layer.name not in needed:
                continue
            view._index[layer.name] = len(view.layers)
            view.layers.append(layer)
            view.channels[layer.name] = self.channels[layer.name]
            for pname in self.param_names(layer):
                view.params[pname] = self.params[pname]
            for bname in self.buffer_names(layer):
                view.buffers[bname] = self.buffers[bname]
        view.taps = {k: v for k, v in self.taps.items() if v in needed}
        view.output = output
        view.stat_frozen = {n for n in self.stat_frozen if n in needed}
        return view


# ============================================================
# BUILDER
# ============================================================


class GraphBuilder:
    """Appends layers with build-time channel bookkeeping and seeded initialization."""

    def __init__(self, rank, in_channels, seed=0, name="model"):
        self.graph = ModelGraph(rank, in_channels, name)
        self.rng = np.random.default_rng(seed)
        self._module = ("", "")

    @property
    def rank(self):
        return self.graph.rank

    @contextmanager
    def module(self, name, role):
        previous = self._module
        self._module = (name, role)
        try:
            yield
        finally:
            self._module = previous

    def channels(self, node):
        try:
            return self.graph.channels[node]
        except KeyError:
            raise GraphError(f"Unknown node {node}")

    def add(self, layer):
        g = self.graph
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"Unsupported layer kind {layer.kind}")
        if layer.name in g._index or layer.name == "input":
            raise GraphError(f"Duplicate layer name {layer.name}")
        for node in layer.inputs:
            if node not in g.channels:
                raise GraphError(f"{layer.name}: input {node} is not defined before use")
        if not layer.module and self._module[0]:
            layer = replace(layer, module=self._module[0], role=self._module[1])

        in_ch = [g.channels[n] for n in layer.inputs]
        if layer.kind == "conv":
            a = layer.attrs
            if a["in_channels"] != in_ch[0]:
                raise GraphError(f"{layer.name}: expects {a['in_channels']} input channels, "
                                 f"{layer.inputs[0]} has {in_ch[0]}")
            if len(a["kernel"]) != self.rank:
                raise GraphError(f"{layer.name}: kernel {a['kernel']} is not rank {self.rank}")
            out_ch = a["out_channels"]
            self._init_conv(layer)
        elif layer.kind == "bn":
            out_ch = in_ch[0]
            self._init_bn(layer.name, out_ch)
        elif layer.kind == "add":
            if in_ch[0] != in_ch[1]:
                raise GraphError(f"{layer.name}: cannot sum {in_ch[0]} and {in_ch[1]} channels")
            out_ch = in_ch[0]
        elif layer.kind == "concat":
            out_ch = sum(in_ch)
        else:
            out_ch = in_ch[0]

        g._index[layer.name] = len(g.layers)
        g.layers.append(layer)
        g.channels[layer.name] = out_ch
        return layer.name

    def _init_conv(self, layer):
        a = layer.attrs
        shape = (a["out_channels"], a["in_channels"]) + tuple(a["kernel"])
        fan_in = a["in_channels"] * int(np.prod(a["kernel"]))
        weight = self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        self.graph.params[f"{layer.name}.weight"] = T.Tensor(weight, requires_grad=True, name=f"{layer.name}.weight")
        if a.get("bias"):
            self.graph.params[f"{layer.name}.bias"] = T.Tensor(np.zeros(a["out_channels"]), requires_grad=True,
                                                               name=f"{layer.name}.bias")

    def _init_bn(self, name, channels):
        dtype = T.get_dtype()
        self.graph.params[f"{name}.scale"] = T.Tensor(np.ones(channels), requires_grad=True, name=f"{name}.scale")
        self.graph.params[f"{name}.shift"] = T.Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.shift")
        self.graph.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=dtype)
        self.graph.buffers[f"{name}.running_var"] = np.ones(channels, dtype=dtype)

    # ---- layer shorthands ----

    def conv(self, name, x, out_channels, kernel, stride=1, padding="same", bias=False, optional=False, **attrs):
        kernel = tuple(kernel) if not isinstance(kernel, int) else (kernel,) * self.rank
        stride = tuple(stride) if not isinstance(stride, int) else (stride,) * self.rank
        padding = tuple(k // 2 for k in kernel) if padding == "same" else (
            tuple(padding) if not isinstance(padding, int) else (padding,) * self.rank)
        attrs.update(in_channels=self.channels(x), out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding, bias=bias)
        return self.add(Layer(name, "conv", (x,), attrs, optional=optional))

    def bn(self, name, x, optional=False):
        return self.add(Layer(name, "bn", (x,), {}, optional=optional))

    def relu(self, name, x):
        return self.add(Layer(name, "relu", (x,)))

    def maxpool(self, name, x, kernel, stride=None, padding=0, fuse_slices=False, optional=False):
        kernel = tuple(kernel) if not isinstance(kernel, int) else (kernel,) * self.rank
        stride = kernel if stride is None else (tuple(stride) if not isinstance(stride, int) else (stride,) * self.rank)
        padding = tuple(padding) if not isinstance(padding, int) else (padding,) * self.rank
        attrs = {"kernel": kernel, "stride": stride, "padding": padding}
        if fuse_slices:
            attrs["fuse_slices"] = True
        return self.add(Layer(name, "maxpool", (x,), attrs, optional=optional))

    def sum(self, name, a, b):
        return self.add(Layer(name, "add", (a, b)))

    def concat(self, name, nodes):
        return self.add(Layer(name, "concat", tuple(nodes)))

    def upsample(self, name, x, like, optional=False):
        return self.add(Layer(name, "upsample", (x,), {"like": like}, optional=optional))

    def conv_bn_relu(self, prefix, x, out_channels, kernel, stride=1, padding="same", suffix=""):
        c = self.conv(f"{prefix}.conv{suffix}", x, out_channels, kernel, stride, padding)
        b = self.bn(f"{prefix}.bn{suffix}", c)
        return self.relu(f"{prefix}.relu{suffix}", b)

    def tap(self, name, node):
        self.graph.taps[name] = node

    def build(self, output):
        if output not in self.graph.channels:
            raise GraphError(f"Output node {output} is not defined")
        self.graph.output = output
        return self.graph


# ============================================================
# FORWARD EVALUATION
# ============================================================


def _pool_window(layer, rank, z_pooling):
    a = layer.attrs
    kernel, stride, padding = a["kernel"], a["stride"], a["padding"]
    if rank == 3 and not z_pooling:
        kernel = kernel[:2] + (1,)
        stride = stride[:2] + (1,)
        padding = padding[:2] + (0,)
    return kernel, stride, padding


def _is_identity_pool(layer, rank, kernel, stride, depth):
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        return True
    return rank == 3 and layer.attrs.get("fuse_slices", False) and depth < kernel[2]


def _run_layer(model, layer, args, env, mode, z_pooling):
    a = layer.attrs
    if layer.kind == "conv":
        bias = model.params.get(f"{layer.name}.bias")
        return T.conv(args[0], model.params[f"{layer.name}.weight"], bias, a["stride"], a["padding"])
    if layer.kind == "bn":
        bn_mode = "infer" if (mode == "infer" or layer.name in model.stat_frozen) else "train"
        return T.batchnorm(args[0], model.params[f"{layer.name}.scale"], model.params[f"{layer.name}.shift"],
                           model.buffers[f"{layer.name}.running_mean"], model.buffers[f"{layer.name}.running_var"],
                           mode=bn_mode)
    if layer.kind == "relu":
        return T.relu(args[0])
    if layer.kind == "maxpool":
        kernel, stride, padding = _pool_window(layer, model.rank, z_pooling)
        if _is_identity_pool(layer, model.rank, kernel, stride, args[0].shape[-1]):
            return args[0]
        return T.maxpool(args[0], kernel, stride, padding)
    if layer.kind == "add":
        return T.add(args[0], args[1])
    if layer.kind == "concat":
        return T.concat(args)
    if layer.kind == "upsample":
        return T.upsample_linear(args[0], env[a["like"]].shape[2:])
    raise GraphError(f"Unsupported layer kind {layer.kind}")


def _last_uses(model):
    plan = {}
    for i, layer in enumerate(model.layers):
        for node in layer.inputs:
            plan[node] = i
        if layer.kind == "upsample":
            plan[layer.attrs["like"]] = i
    return plan


def run_graph(model, x, mode="infer", z_pooling=True, collect=None):
    """
    Evaluate every layer in order. collect names nodes whose activations are
    returned alongside the output (used by the equivalence validator).
    """
    if mode not in MODES:
        raise GraphError(f"Unknown mode {mode!r}; expected train or infer")
    x = T.as_tensor(x)
    if x.ndim != model.rank + 2 or x.shape[1] != model.in_channels:
        raise ShapeError(f"{model.name}: input {format_shape(x.shape)} does not match "
                         f"N×{model.in_channels}×{'×'.join(['*'] * model.rank)}")
    keep = set(collect or ())
    last = _last_uses(model)
    env = {"input": x}
    collected = {}
    for i, layer in enumerate(model.layers):
        args = [env[n] for n in layer.inputs]
        try:
            env[layer.name] = _run_layer(model, layer, args, env, mode, z_pooling)
        except ShapeError as e:
            raise ShapeError(f"{layer.name}: {e}") from e
        if collect and layer.name in keep:
            collected[layer.name] = env[layer.name]
        for node in set(layer.inputs) | ({layer.attrs["like"]} if layer.kind == "upsample" else set()):
            if last.get(node) == i and node != model.output and node != "input":
                env.pop(node, None)
        if layer.name == model.output:
            break
    out = env[model.output]
    return (out, collected) if collect else out


def forward(model, x, mode="infer", z_pooling=True):
    """Deterministic evaluation; in train mode ops are recorded on the active GradTape."""
    return run_graph(model, x, mode=mode, z_pooling=z_pooling)


# ============================================================
# AUDIT HELPERS
# ============================================================


def _pool_shape(shape, kernel, stride, padding):
    out = []
    for extent, k, s, p in zip(shape, kernel, stride, padding):
        if extent + 2 * p < k:
            raise ShapeError(f"Pooling window {kernel} does not fit input extents {shape}")
        out.append((extent + 2 * p - k) // s + 1)
    return tuple(out)


def infer_shapes(model, input_shape, z_pooling=True):
    """Output shape of every node for a given input shape, without evaluating."""
    shapes = {"input": tuple(input_shape)}
    for layer in model.layers:
        src = shapes[layer.inputs[0]]
        a = layer.attrs
        if layer.kind == "conv":
            spatial = []
            for axis, (extent, k, s, p) in enumerate(zip(src[2:], a["kernel"], a["stride"], a["padding"])):
                extent_out = (extent + 2 * p - k) // s + 1
                if extent + 2 * p < k or extent_out < 1:
                    raise ShapeError(f"{layer.name}: empty output along axis {axis}")
                spatial.append(extent_out)
            shape = (src[0], a["out_channels"]) + tuple(spatial)
        elif layer.kind == "maxpool":
            kernel, stride, padding = _pool_window(layer, model.rank, z_pooling)
            if _is_identity_pool(layer, model.rank, kernel, stride, src[-1]):
                shape = src
            else:
                try:
                    shape = src[:2] + _pool_shape(src[2:], kernel, stride, padding)
                except ShapeError as e:
                    raise ShapeError(f"{layer.name}: {e}") from e
        elif layer.kind == "concat":
            shape = (src[0], sum(shapes[n][1] for n in layer.inputs)) + src[2:]
        elif layer.kind == "upsample":
            shape = src[:2] + shapes[a["like"]][2:]
        elif layer.kind == "add":
            other = shapes[layer.inputs[1]]
            if other != src:
                raise ShapeError(f"{layer.name}: cannot sum {format_shape(src)} and {format_shape(other)}")
            shape = src
        else:
            shape = src
        shapes[layer.name] = shape
    return shapes


def dump_graph(model, input_shape, z_pooling=True):
    """Layer list with output shapes as UTF-8 JSON for audit tooling."""
    shapes = infer_shapes(model, input_shape, z_pooling)
    layers = []
    for layer in model.layers:
        entry = {
            "name": layer.name,
            "kind": layer.kind,
            "inputs": list(layer.inputs),
            "module": layer.module,
            "role": layer.role,
            "attrs": {k: list(v) if isinstance(v, tuple) else v for k, v in layer.attrs.items()},
            "output_shape": list(shapes[layer.name]),
            "params": {p: list(model.params[p].shape) for p in model.param_names(layer)},
        }
        layers.append(entry)
    doc = {
        "name": model.name,
        "rank": model.rank,
        "input_shape": list(input_shape),
        "output": model.output,
        "taps": model.taps,
        "parameter_count": parameter_count(model),
        "conv_layers": count_conv_layers(model),
        "layers": layers,
    }
    return json.dumps(doc, indent=2, sort_keys=False)


def parameter_count(model):
    return int(sum(p.size for _, p in model.parameters()))


def count_conv_layers(model):
    """Grouped count treats a decomposed 1×K / K×1 pair as one layer."""
    convs = [layer for layer in model.layers if layer.kind == "conv"]
    groups = {layer.attrs.get("group", layer.name) for layer in convs}
    return {"grouped": len(groups), "raw": len(convs)}


def structure_signature(model):
    """
    Width- and depth-independent description of the wiring: module roles in
    order of first appearance, plus the set of per-role layer templates
    (optional layers such as projection shortcuts excluded).
    """
    sequence = []
    templates = {}
    current = None
    for layer in model.layers:
        if layer.module != current:
            current = layer.module
            if layer.role not in sequence:
                sequence.append(layer.role)
            templates.setdefault(current, (layer.role, []))
        if layer.optional:
            continue
        local = layer.name[len(layer.module) + 1:] if layer.module else layer.name
        templates[current][1].append((local, layer.kind))
    per_role = {(role, tuple(items)) for role, items in templates.values()}
    return tuple(sequence), frozenset(per_role)
