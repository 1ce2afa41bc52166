"""
Patch sampling for AHNET
Positive/negative patch draws around lesion centres, slice triples for the
2D stage, geometric augmentation and an optional background prefetch queue.
"""

import logging
import math
import queue
import threading
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from core import tensor as T
from core.objectives import HeatmapSpec, gaussian_heatmap
from utils import SamplingError, get_error_message, log_event

logger = logging.getLogger("ahnet.sampling")

NEGATIVE_TRIES = 100
AUGMENT_TRIES = 10


@dataclass
class PatchDraw:
    image: np.ndarray
    target: np.ndarray
    positive: bool
    volume: int
    origin: tuple


# ============================================================
# PREPROCESSING
# ============================================================


def truncate_intensity(data, window):
    """Clamp to [low, high] and rescale to [0, 1]; an empty window leaves data alone."""
    if not window:
        return data
    low, high = window
    if not high > low:
        raise SamplingError(f"Intensity window {window} is empty")
    return ((np.clip(data, low, high) - low) / (high - low)).astype(np.float32)


# ============================================================
# AUGMENTATION
# ============================================================


def random_transform(rng, cfg, volumetric=True):
    """Rotation in the xy plane, per-axis scaling and an xy mirror; all draws always consumed."""
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation))
    scale = tuple(float(s) for s in 1.0 + rng.uniform(-cfg.scaling, cfg.scaling, size=3))
    mirror = bool(rng.random() < 0.5) and cfg.mirror
    if not volumetric:
        scale = scale[:2] + (1.0,)
    return {"angle": angle, "scale": scale, "mirror": mirror}


def _affine(shape, params):
    """Output-to-input matrix and offset about the patch centre."""
    theta = math.radians(params["angle"])
    rotation = np.array([[math.cos(theta), -math.sin(theta), 0.0],
                         [math.sin(theta), math.cos(theta), 0.0],
                         [0.0, 0.0, 1.0]])
    matrix = rotation @ np.diag([1.0 / s for s in params["scale"]])
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return matrix, center - matrix @ center


def apply_transform(array, params, order):
    """Same geometric transform for any (X, Y, Z) array; order 0 for masks, 1 otherwise."""
    out = array[::-1].copy() if params["mirror"] else array
    if params["angle"] == 0 and all(s == 1.0 for s in params["scale"]):
        return out if params["mirror"] else out.copy()
    matrix, offset = _affine(out.shape, params)
    return ndimage.affine_transform(out, matrix, offset=offset, order=order, mode="nearest")


def transform_point(point, shape, params):
    """Where a voxel of the input patch lands after apply_transform."""
    p = np.asarray(point, dtype=np.float64).copy()
    if params["mirror"]:
        p[0] = shape[0] - 1 - p[0]
    matrix, offset = _affine(shape, params)
    return np.linalg.solve(matrix, p - offset)


def augment(patch, target, rng, cfg, nearest_target=False, volumetric=True, keep=None):
    """
    Random transform of a patch and its target. keep lists patch-local
    voxels of which at least one must stay inside the window; up to
    AUGMENT_TRIES transforms are drawn before falling back to a mirror only.
    """
    for _ in range(AUGMENT_TRIES):
        params = random_transform(rng, cfg, volumetric)
        if not keep or any(_inside(transform_point(c, patch.shape, params), patch.shape) for c in keep):
            break
    else:
        params = {"angle": 0.0, "scale": (1.0, 1.0, 1.0), "mirror": params["mirror"]}
    image = apply_transform(patch, params, 1)
    label = apply_transform(target, params, 0 if nearest_target else 1)
    log_event("augment", stage="sampling", details=params)
    return image, label, params


def _inside(point, shape):
    return all(0 <= int(math.floor(c + 0.5)) < s for c, s in zip(point, shape))


# ============================================================
# SAMPLERS
# ============================================================


def _center_voxel(box):
    return tuple(int(math.floor(c)) for c in box.center)


class PatchSampler:
    """
    Draws training patches: with probability positive_fraction the patch holds
    at least one lesion centre, otherwise none. mode "3d" yields volumetric
    patches; mode "2d" yields slice triples (positives on a centre slice).
    """

    def __init__(self, volumes, cfg, task="detection", seed=0, mode="3d"):
        if mode not in ("2d", "3d"):
            raise SamplingError(f"Unknown sampler mode {mode}")
        self.cfg = cfg
        self.task = task
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.patch = tuple(cfg.patch) if mode == "3d" else tuple(cfg.patch[:2])
        self.images = []
        self.targets = []
        self.centers = []
        for v in volumes:
            dims = v.dims
            if any(p > d for p, d in zip(self.patch, dims)):
                raise SamplingError(f"Patch {self.patch} does not fit volume {v.name} with dims {dims}")
            self.images.append(truncate_intensity(np.asarray(v.data, dtype=np.float32), cfg.intensity_range))
            if task == "detection":
                spec = HeatmapSpec(cfg.heatmap_k, cfg.heatmap_mode)
                self.targets.append(gaussian_heatmap(v.boxes, dims, spec).astype(np.float32))
            else:
                mask = v.mask if v.mask is not None else np.zeros(dims, dtype=np.uint8)
                self.targets.append(np.asarray(mask, dtype=np.uint8))
            self.centers.append([_center_voxel(b) for b in v.boxes])
        self.lesions = [(vi, c) for vi, cs in enumerate(self.centers) for c in cs]
        if cfg.positive_fraction > 0 and not self.lesions:
            raise SamplingError(get_error_message('no_positives', fraction=cfg.positive_fraction))

    # ---- geometry ----

    def _window(self, origin):
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch))

    def _holds_center(self, vi, origin, z=None):
        for c in self.centers[vi]:
            inside = all(o <= ci < o + p for o, ci, p in zip(origin, c, self.patch))
            if inside and (z is None or c[2] == z):
                return True
        return False

    def _positive_origin(self):
        vi, c = self.lesions[int(self.rng.integers(len(self.lesions)))]
        dims = self.images[vi].shape
        origin = []
        for ci, p, d in zip(c, self.patch, dims):
            lo, hi = max(0, ci - p + 1), min(ci, d - p)
            origin.append(int(self.rng.integers(lo, hi + 1)))
        z = c[2] if self.mode == "2d" else None
        return vi, tuple(origin), z

    def _negative_origin(self):
        for _ in range(NEGATIVE_TRIES):
            vi = int(self.rng.integers(len(self.images)))
            dims = self.images[vi].shape
            origin = tuple(int(self.rng.integers(0, d - p + 1)) for p, d in zip(self.patch, dims))
            z = int(self.rng.integers(dims[2])) if self.mode == "2d" else None
            if not self._holds_center(vi, origin, z):
                return vi, origin, z
        raise SamplingError("Could not find a patch without lesion centres; reduce the patch size")

    # ---- draws ----

    def draw(self):
        positive = bool(self.rng.random() < self.cfg.positive_fraction)
        vi, origin, z = self._positive_origin() if positive else self._negative_origin()
        if self.mode == "3d":
            window = self._window(origin)
            image = self.images[vi][window]
            target = self.targets[vi][window]
        else:
            image, target = self._triple(vi, origin, z)
        if self.cfg.augment:
            keep = self._local_centers(vi, origin, z) if positive else None
            image, target = self._augment(image, target, keep)
        return PatchDraw(np.ascontiguousarray(image), np.ascontiguousarray(target), positive, vi, origin)

    def _triple(self, vi, origin, z):
        xy = self._window(origin)
        img = self.images[vi]
        depth = img.shape[2]
        slices = [img[xy + (k,)] if 0 <= k < depth else np.zeros(self.patch, dtype=np.float32)
                  for k in (z - 1, z, z + 1)]
        image = np.stack(slices, axis=-1)
        target = self.targets[vi][xy + (z,)][..., None]
        return image, target

    def _local_centers(self, vi, origin, z=None):
        """Lesion centres inside the window, in patch coordinates (triples: middle slice)."""
        local = []
        for c in self.centers[vi]:
            if self.mode == "3d":
                if all(o <= ci < o + p for o, ci, p in zip(origin, c, self.patch)):
                    local.append(tuple(ci - o for ci, o in zip(c, origin)))
            elif c[2] == z and all(o <= ci < o + p for o, ci, p in zip(origin, c[:2], self.patch)):
                local.append((c[0] - origin[0], c[1] - origin[1], 1))
        return local

    def _augment(self, image, target, keep=None):
        nearest = self.task == "segmentation"
        image, target, _ = augment(image, target, self.rng, self.cfg, nearest_target=nearest,
                                   volumetric=self.mode == "3d", keep=keep)
        return image, target

    def batch(self, size=None):
        """Network-ready arrays: inputs N×C×spatial, targets heatmaps N×1×spatial or labels N×spatial."""
        draws = [self.draw() for _ in range(size or self.cfg.batch_size)]
        dtype = T.get_dtype()
        if self.mode == "3d":
            x = np.stack([d.image for d in draws])[:, None]
            y = np.stack([d.target for d in draws])
        else:
            x = np.stack([np.moveaxis(d.image, -1, 0) for d in draws])
            y = np.stack([d.target[..., 0] for d in draws])
        if self.task == "detection":
            return x.astype(dtype), y[:, None].astype(dtype)
        return x.astype(dtype), (y > 0).astype(np.int64)


# ============================================================
# PREFETCH
# ============================================================


class Prefetcher:
    """
    Runs produce() on a background thread into a bounded queue. A single
    producer keeps the sequence identical to synchronous draws; depth 0
    disables the thread. Share one Prefetcher across consecutive phases
    that draw from the same source: close() discards queued items.
    """

    _DONE = object()

    def __init__(self, produce, depth=0):
        self.produce = produce
        self.depth = depth
        self._queue = None
        self._stop = threading.Event()
        self._thread = None
        if depth > 0:
            self._queue = queue.Queue(maxsize=depth)
            self._thread = threading.Thread(target=self._run, name="ahnet-prefetch", daemon=True)
            self._thread.start()

    def _offer(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            while not self._stop.is_set():
                if not self._offer(self.produce()):
                    return
        except Exception as e:
            self._offer((self._DONE, e))

    def next(self):
        if self._queue is None:
            return self.produce()
        item = self._queue.get()
        if isinstance(item, tuple) and len(item) == 2 and item[0] is self._DONE:
            raise item[1]
        return item

    def close(self):
        """Stop the producer and wait until it has left produce()."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            while not self._queue.empty():
                self._queue.get_nowait()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False
