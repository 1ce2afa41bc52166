"""
Whole-volume inference and the slice-wise vs hybrid benchmark for AHNET
"""

import logging
import math
import time

import numpy as np
from tqdm import tqdm

from core import tensor as T
from core.evaluation import extract_maxima, predicted_mask
from core.graph import forward
from core.transfer import slice_triples
from utils import ConfigError, ShapeError, format_ms, format_shape, get_error_message, log_event

logger = logging.getLogger("ahnet.inference")

SLICE_CHUNK = 8


# ============================================================
# TILING
# ============================================================


def tile_origins(extent, tile, stride):
    """Start offsets along one axis; the last tile is flush with the far edge."""
    if tile >= extent:
        return [0]
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def plan_tiles(dims, tile, stride):
    """Clamp the tile to the volume and list every tile origin in x, y, z order."""
    if len(dims) != 3 or len(tile) != 3 or len(stride) != 3:
        raise ShapeError(f"Tiling needs 3 extents, got volume {format_shape(dims)}, tile {tile}, stride {stride}")
    tile = tuple(min(t, d) for t, d in zip(tile, dims))
    for t, s in zip(tile, stride):
        if s < 1 or s > t:
            raise ShapeError(f"Tile stride {tuple(stride)} must lie in 1..tile {tile}")
    axes = [tile_origins(d, t, s) for d, t, s in zip(dims, tile, stride)]
    origins = [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]
    return tile, origins


def infer_volume(model, data, tiling, progress=False):
    """
    Sliding-window 3D inference with uniform overlap averaging.
    Returns the response as C×X×Y×Z; a volume that fits in one tile is a
    single untiled forward pass.
    """
    vol = np.asarray(data, dtype=T.get_dtype())
    if vol.ndim != 3:
        raise ShapeError(f"Inference needs an X×Y×Z volume, got {format_shape(vol.shape)}")
    tile, origins = plan_tiles(vol.shape, tuple(tiling.tile), tuple(tiling.stride))
    if len(origins) == 1:
        return forward(model, vol[None, None]).data[0]

    acc = None
    counts = np.zeros(vol.shape, dtype=np.float64)
    for origin in tqdm(origins, desc="tiles", disable=not progress, leave=False):
        window = tuple(slice(o, o + t) for o, t in zip(origin, tile))
        out = forward(model, vol[window][None, None]).data[0]
        if acc is None:
            acc = np.zeros((out.shape[0],) + vol.shape, dtype=np.float64)
        acc[(slice(None),) + window] += out
        counts[window] += 1.0
    return (acc / counts).astype(T.get_dtype())


def infer_volume_slicewise(model2d, data, chunk=SLICE_CHUNK):
    """The 2D network over every slice triple, restacked as C×X×Y×Z."""
    triples = slice_triples(np.asarray(data, dtype=T.get_dtype()))
    outputs = [forward(model2d, triples[i:i + chunk]).data for i in range(0, len(triples), chunk)]
    return np.moveaxis(np.concatenate(outputs, axis=0), 0, -1)


def response_map(output, task):
    """Detection: the single heatmap channel. Segmentation: the binary predicted mask."""
    if task == "detection":
        return output[0]
    return predicted_mask(output)


def detect(output, eval_cfg):
    return extract_maxima(output[0], threshold=eval_cfg.threshold, radius=tuple(eval_cfg.radius))


# ============================================================
# BENCHMARK
# ============================================================


class RunningStats:
    """Welford mean and variance."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, value):
        self.n += 1
        delta = value - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (value - self.mean)

    @property
    def std(self):
        return math.sqrt(self._m2 / (self.n - 1)) if self.n > 1 else 0.0


def benchmark_inference(model2d, model3d, dims, repeats=10, warmup=1, seed=0, preset=None, progress=False):
    """
    Per-volume wall clock for slice-wise 2D inference (one slice triple per
    pass) against a single hybrid 3D pass. Slicing happens before timing.
    """
    if repeats < 3:
        raise ConfigError(get_error_message('invalid_value', key="repeats", value=repeats, reason="must be >= 3"))
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    volume = rng.standard_normal(dims).astype(T.get_dtype())
    triples = [t[None] for t in slice_triples(volume)]
    batch3d = volume[None, None]

    def run_2d():
        for triple in triples:
            forward(model2d, triple)

    def run_3d():
        forward(model3d, batch3d)

    for _ in range(warmup):
        run_2d()
        run_3d()

    stats = {"slicewise_2d": RunningStats(), "hybrid_3d": RunningStats()}
    for _ in tqdm(range(repeats), desc="bench", disable=not progress, leave=False):
        for key, fn in (("slicewise_2d", run_2d), ("hybrid_3d", run_3d)):
            start = time.perf_counter()
            fn()
            stats[key].push(time.perf_counter() - start)

    report = {
        "preset": preset,
        "dims": list(dims),
        "repeats": repeats,
        "warmup": warmup,
        "slices": len(triples),
    }
    for key, s in stats.items():
        report[f"{key}_mean_ms"] = s.mean * 1000.0
        report[f"{key}_std_ms"] = s.std * 1000.0
    h = stats["hybrid_3d"].mean
    report["ratio"] = stats["slicewise_2d"].mean / h if h > 0 else float("inf")
    logger.info("Slice-wise 2D %s vs hybrid 3D %s per volume (ratio %.2f)",
                format_ms(stats["slicewise_2d"].mean), format_ms(h), report["ratio"])
    log_event("benchmark", stage="bench", details=report)
    return report
