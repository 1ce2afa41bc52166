"""
Network builders for AHNET
2D multi-channel GCN (residual bottleneck encoder + GCN/refinement decoder)
and the 3D hybrid network (lifted encoder + anisotropic dense decoder +
pyramid volumetric pooling), both driven by a NetConfig preset.
"""

import logging
from dataclasses import dataclass, asdict

from core.graph import GraphBuilder
from core.transfer import lift_encoder
from utils import GraphError, TransferError, get_error_message, format_shape

logger = logging.getLogger("ahnet.nets")

# Backbone taps, shallow to deep
TAP_ORDER = ("stem", "pool", "stage1", "stage2", "stage3", "stage4")


@dataclass(frozen=True)
class NetConfig:
    preset: str = "desk"
    stem_width: int = 8
    stage_widths: tuple = (16, 32, 64, 128)
    stage_blocks: tuple = (1, 1, 1, 1)
    decoder_taps: tuple = ("stage2", "stage3", "stage4")
    gcn_kernels: tuple = (7, 5, 3)
    decoder_width: int = 16
    pyramid_pools: tuple = (16, 8, 4, 2)
    out_channels: int = 1
    in_slices: int = 3

    def validate(self):
        widths = (self.stem_width,) + tuple(self.stage_widths)
        if len(self.stage_widths) != 4 or len(self.stage_blocks) != 4:
            raise GraphError("Expected four encoder stages")
        if any(w < 1 for w in widths) or any(b < 1 for b in self.stage_blocks):
            raise GraphError(f"Invalid width schedule {widths} / blocks {self.stage_blocks}")
        if any(b > a for a, b in zip(self.stage_widths[1:], self.stage_widths)):
            raise GraphError(f"Stage widths must be non-decreasing: {self.stage_widths}")
        if any(w % 4 for w in self.stage_widths):
            raise GraphError(f"Stage widths must be divisible by 4 (bottleneck): {self.stage_widths}")
        if len(self.decoder_taps) != len(self.gcn_kernels):
            raise GraphError(f"GCN kernel schedule {self.gcn_kernels} does not match "
                             f"{len(self.decoder_taps)} decoder taps")
        positions = [TAP_ORDER.index(t) if t in TAP_ORDER else -1 for t in self.decoder_taps]
        if -1 in positions or positions != sorted(set(positions)):
            raise GraphError(f"Decoder taps must be distinct backbone taps, shallow to deep: {self.decoder_taps}")
        if any(k < 1 or k % 2 == 0 for k in self.gcn_kernels):
            raise GraphError(f"GCN kernels must be odd: {self.gcn_kernels}")
        if self.decoder_width < 1 or self.out_channels < 1 or not self.pyramid_pools:
            raise GraphError("Decoder width, output channels and pyramid pools must be positive")
        return self

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "desk": NetConfig(),
    "paper": NetConfig(
        preset="paper",
        stem_width=64,
        stage_widths=(256, 512, 1024, 2048),
        stage_blocks=(3, 4, 6, 3),
        decoder_taps=TAP_ORDER,
        gcn_kernels=(63, 31, 15, 9, 7, 5),
        decoder_width=32,
        pyramid_pools=(64, 32, 16, 8),
    ),
}


def net_preset(name, out_channels=1):
    if name not in PRESETS:
        raise GraphError(get_error_message('invalid_preset', value=name))
    cfg = PRESETS[name]
    if out_channels != cfg.out_channels:
        cfg = NetConfig(**{**cfg.to_dict(), "out_channels": out_channels})
    return cfg.validate()


# ============================================================
# 2D BACKBONE
# ============================================================


def _bottleneck(b, prefix, x, width, stride):
    mid = width // 4
    boundary = {"boundary": True} if stride > 1 else {}
    with b.module(prefix, "bottleneck"):
        h = b.conv(f"{prefix}.conv1", x, mid, 1, stride=stride, **boundary)
        h = b.relu(f"{prefix}.relu1", b.bn(f"{prefix}.bn1", h))
        h = b.conv(f"{prefix}.conv2", h, mid, 3)
        h = b.relu(f"{prefix}.relu2", b.bn(f"{prefix}.bn2", h))
        h = b.bn(f"{prefix}.bn3", b.conv(f"{prefix}.conv3", h, width, 1))
        if stride > 1 or b.channels(x) != width:
            shortcut = b.conv(f"{prefix}.proj", x, width, 1, stride=stride, optional=True, **boundary)
            shortcut = b.bn(f"{prefix}.proj_bn", shortcut, optional=True)
        else:
            shortcut = x
        return b.relu(f"{prefix}.relu3", b.sum(f"{prefix}.add", h, shortcut))


def _encoder(b, cfg):
    with b.module("stem", "stem"):
        x = b.conv("stem.conv", "input", cfg.stem_width, 7, stride=2, padding=3)
        x = b.relu("stem.relu", b.bn("stem.bn", x))
        b.tap("stem", x)
        x = b.maxpool("stem.pool", x, 3, stride=2, padding=1)
        b.tap("pool", x)
    for s, (width, blocks) in enumerate(zip(cfg.stage_widths, cfg.stage_blocks), start=1):
        for blk in range(blocks):
            stride = 2 if s > 1 and blk == 0 else 1
            x = _bottleneck(b, f"stage{s}.block{blk}", x, width, stride)
        b.tap(f"stage{s}", x)
    return x


def build_backbone2d(cfg, seed=0):
    """Residual bottleneck encoder on slice triples; taps stem, pool, stage1..stage4."""
    cfg.validate()
    b = GraphBuilder(2, cfg.in_slices, seed, "backbone2d")
    return b.build(_encoder(b, cfg))


# ============================================================
# 2D DECODER
# ============================================================


def gcn_module(b, prefix, x, out_channels, k):
    """Large K×K kernel simulated by two summed 1-D branches."""
    if k < 1 or k % 2 == 0:
        raise GraphError(f"{prefix}: GCN kernel must be odd, got {k}")
    p = k // 2
    a = b.conv(f"{prefix}.a1", x, out_channels, (k, 1), padding=(p, 0), bias=True, group=f"{prefix}.a")
    a = b.conv(f"{prefix}.a2", a, out_channels, (1, k), padding=(0, p), bias=True, group=f"{prefix}.a")
    c = b.conv(f"{prefix}.b1", x, out_channels, (1, k), padding=(0, p), bias=True, group=f"{prefix}.b")
    c = b.conv(f"{prefix}.b2", c, out_channels, (k, 1), padding=(p, 0), bias=True, group=f"{prefix}.b")
    return b.sum(f"{prefix}.sum", a, c)


def refinement_block(b, prefix, x):
    """out = x + conv(relu(conv(x)))"""
    c = b.channels(x)
    h = b.conv(f"{prefix}.conv1", x, c, 3, bias=True)
    h = b.relu(f"{prefix}.relu", h)
    h = b.conv(f"{prefix}.conv2", h, c, 3, bias=True)
    return b.sum(f"{prefix}.add", x, h)


def _up_module(b, index, x, like):
    prefix = f"decoder.up{index}"
    with b.module(prefix, "up"):
        h = b.conv(f"{prefix}.proj", x, b.channels(x), 1, bias=True)
        return b.upsample(f"{prefix}.resize", h, like=like)


def _resize_chain(cfg):
    """Targets the decoder climbs through after its shallowest level."""
    shallowest = TAP_ORDER.index(cfg.decoder_taps[0])
    chain = [t for t in ("stage1", "stem") if TAP_ORDER.index(t) < shallowest]
    return chain + ["input"]


def build_mcgcn(cfg, seed=0):
    """
    Encoder taps -> GCN -> refinement -> sum with the upsampled deeper level
    -> refinement -> Up; the last Up lands on the input resolution.
    """
    cfg.validate()
    b = GraphBuilder(2, cfg.in_slices, seed, "mcgcn")
    _encoder(b, cfg)
    taps = b.graph.taps
    levels = list(zip(cfg.decoder_taps, cfg.gcn_kernels))[::-1]
    targets = [taps[t] for t, _ in levels[1:]] + [taps.get(t, "input") for t in _resize_chain(cfg)]

    carried = None
    up_index = 0
    for tap, k in levels:
        prefix = f"decoder.{tap}"
        with b.module(prefix, "gcn-level"):
            h = gcn_module(b, f"{prefix}.gcn", taps[tap], cfg.out_channels, k)
            h = refinement_block(b, f"{prefix}.br", h)
            if carried is not None:
                h = b.sum(f"{prefix}.merge", h, carried)
                h = refinement_block(b, f"{prefix}.br2", h)
        carried = _up_module(b, up_index, h, targets[up_index])
        up_index += 1
    while up_index < len(targets):
        carried = _up_module(b, up_index, carried, targets[up_index])
        up_index += 1
    return b.build(carried)


# ============================================================
# 3D DECODER
# ============================================================


def _cbr(b, name, x, width, kernel, padding, relu=True):
    h = b.bn(f"{name}_bn", b.conv(name, x, width, kernel, padding=padding))
    return b.relu(f"{name}_relu", h) if relu else h


def anisotropic_block(b, prefix, x, f):
    """xy bottleneck (3×3×1) then z bottleneck (1×1×3) with a residual sum."""
    if b.rank != 3:
        raise GraphError(f"{prefix}: anisotropic blocks are 3D")
    y = _cbr(b, f"{prefix}.xy1", x, f, (1, 1, 1), (0, 0, 0))
    y = _cbr(b, f"{prefix}.xy2", y, f, (3, 3, 1), (1, 1, 0))
    y = _cbr(b, f"{prefix}.xy3", y, f, (1, 1, 1), (0, 0, 0))
    z = _cbr(b, f"{prefix}.z1", y, f, (1, 1, 1), (0, 0, 0))
    z = _cbr(b, f"{prefix}.z2", z, f, (1, 1, 3), (0, 0, 1))
    z = _cbr(b, f"{prefix}.z3", z, f, (1, 1, 1), (0, 0, 0), relu=False)
    return b.relu(f"{prefix}.out", b.sum(f"{prefix}.sum", z, y))


def dense_level(b, prefix, x, f, blocks=3):
    """Block i sees the concatenation of the level input and every earlier block output."""
    with b.module(prefix, "dense-level"):
        features = [x]
        for i in range(blocks):
            inp = x if i == 0 else b.concat(f"{prefix}.in{i}", features)
            features.append(anisotropic_block(b, f"{prefix}.block{i}", inp, f))
        return b.concat(f"{prefix}.out", features)


def pyramid_pooling(b, prefix, x, pools, out_channels):
    """K×K×1 max pools, 1-channel projections, upsampled and concatenated, then projected."""
    maps = [x]
    for i, k in enumerate(pools):
        kernel = (k, k) + (1,) * (b.rank - 2)
        h = b.maxpool(f"{prefix}.pool{i}", x, kernel)
        h = b.conv(f"{prefix}.proj{i}", h, 1, 1, bias=True)
        maps.append(b.upsample(f"{prefix}.up{i}", h, like=x))
    h = b.concat(f"{prefix}.cat", maps)
    return b.conv(f"{prefix}.out", h, out_channels, 1, bias=True)


def _link(b, index, x, skip):
    prefix = f"decoder.link{index}"
    with b.module(prefix, "link"):
        h = b.conv(f"{prefix}.proj", x, b.channels(skip), 1)
        h = b.bn(f"{prefix}.bn", h)
        h = b.upsample(f"{prefix}.up", h, like=skip)
        return b.sum(f"{prefix}.sum", h, skip)


def _lifted_encoder(b, cfg, seed):
    enc2d = build_backbone2d(cfg, seed)
    for layer in lift_encoder(enc2d.layers):
        b.add(layer)
    b.graph.taps.update(enc2d.taps)
    return enc2d.output


def build_encoder3d(cfg, seed=0):
    """The transferred encoder alone (used by the equivalence validator)."""
    cfg.validate()
    b = GraphBuilder(3, 1, seed, "encoder3d")
    return b.build(_lifted_encoder(b, cfg, seed))


def load_encoder(model, transferred):
    """Copy transferred encoder tensors in; returns the names left randomly initialized."""
    tensors = getattr(transferred, "tensors", transferred)
    state = model.state()
    for name, value in tensors.items():
        if name not in state:
            raise TransferError(f"Transferred tensor {name} has no counterpart in {model.name}")
        if tuple(value.shape) != tuple(state[name].shape):
            raise TransferError(f"{name}: transferred shape {format_shape(value.shape)} does not match "
                                f"configured shape {format_shape(state[name].shape)}")
    model.load_state(tensors, strict=False)
    random_init = sorted(n for n, _ in model.parameters() if n not in tensors)
    model.notes["random_init"] = random_init
    return random_init


def build_ahnet(cfg, transferred=None, seed=0):
    """
    Lifted encoder, dense anisotropic levels at the four stage resolutions joined
    by projected skip sums, a head projection back to input size, then pyramid pooling.
    """
    cfg.validate()
    b = GraphBuilder(3, 1, seed, "ahnet")
    _lifted_encoder(b, cfg, seed)
    taps = b.graph.taps
    f = cfg.decoder_width

    x = dense_level(b, "decoder.level4", taps["stage4"], f)
    for s in (3, 2, 1):
        x = _link(b, s, x, taps[f"stage{s}"])
        x = dense_level(b, f"decoder.level{s}", x, f)
    x = _link(b, 0, x, taps["stem"])

    with b.module("decoder.head", "head"):
        x = _cbr(b, "decoder.head.proj", x, f, (1, 1, 1), (0, 0, 0))
        x = b.upsample("decoder.head.up", x, like="input")
    with b.module("decoder.pyramid", "pyramid"):
        out = pyramid_pooling(b, "decoder.pyramid", x, cfg.pyramid_pools, cfg.out_channels)

    model = b.build(out)
    if transferred is not None:
        random_init = load_encoder(model, transferred)
        logger.info("AH-Net built with %d transferred tensors, %d randomly initialized parameters",
                    len(getattr(transferred, "tensors", transferred)), len(random_init))
    return model
