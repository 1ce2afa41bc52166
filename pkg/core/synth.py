"""
Synthetic anisotropic dataset generation for AHNET
Smooth tissue texture, ellipsoidal lesions blurred more along z, box
annotations and masks; the same seed always yields the same bytes.
"""

import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from core.objectives import Box3D
from store import Volume, write_volume, write_annotations, VOLUME_SUFFIX
from utils import ConfigError, log_event

logger = logging.getLogger("ahnet.synth")

TEXTURE_SIGMA = (4.0, 4.0, 0.75)
LESION_BLUR = (0.8, 0.8, 1.2)
PLACEMENT_TRIES = 200


def check_synth_config(cfg):
    dims = cfg.dims
    if cfg.lesions_min < 0 or cfg.lesions_max < cfg.lesions_min:
        raise ConfigError(f"Lesion count range {cfg.lesions_min}..{cfg.lesions_max} is invalid")
    largest = (cfg.extent_xy[1], cfg.extent_xy[1], cfg.extent_z[1])
    for axis, (e, d) in enumerate(zip(largest, dims)):
        if 2 * int(np.ceil(e / 2.0)) + 3 > d:
            raise ConfigError(f"Lesion extent {e} along axis {axis} does not fit volume extent {d}")
    if cfg.spacing[2] < cfg.spacing[0] or cfg.spacing[0] != cfg.spacing[1]:
        raise ConfigError(f"Spacing {cfg.spacing} is not anisotropic with r_z >= r_x = r_y")


def _place_lesion(rng, cfg, placed):
    dims = cfg.dims
    for _ in range(PLACEMENT_TRIES):
        extent = (round(float(rng.uniform(*cfg.extent_xy)), 2),
                  round(float(rng.uniform(*cfg.extent_xy)), 2),
                  round(float(rng.uniform(*cfg.extent_z)), 2))
        low = [int(np.ceil(e / 2.0)) + 1 for e in extent]
        high = [d - 2 - int(np.ceil(e / 2.0)) for e, d in zip(extent, dims)]
        center = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in zip(low, high))
        box = Box3D(center, extent)
        if all(_separated(box, other) for other in placed):
            return box
    return None


def _separated(a, b):
    return any(abs(ca - cb) > (ea + eb) / 2.0 + 2
               for ca, cb, ea, eb in zip(a.center, b.center, a.extent, b.extent))


def generate_volume(rng, cfg, name=""):
    """One volume with its lesions; boxes lie fully inside the grid."""
    dims = tuple(cfg.dims)
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=TEXTURE_SIGMA)
    texture /= max(float(texture.std()), 1e-12)
    data = 0.3 + cfg.texture * texture

    count = int(rng.integers(cfg.lesions_min, cfg.lesions_max + 1))
    boxes = []
    for _ in range(count):
        box = _place_lesion(rng, cfg, boxes)
        if box is not None:
            boxes.append(box)

    grid = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    mask = np.zeros(dims, dtype=bool)
    for box in boxes:
        r = sum(((g - c) / (e / 2.0)) ** 2 for g, c, e in zip(grid, box.center, box.extent))
        mask |= r <= 1.0
    lesions = ndimage.gaussian_filter(mask.astype(np.float64), sigma=LESION_BLUR)
    data = data + cfg.contrast * lesions + cfg.noise * rng.standard_normal(dims)
    return Volume(data.astype(np.float32), tuple(cfg.spacing), mask.astype(np.uint8), boxes, name)


def synth_generate(cfg, n, out_dir, seed):
    """Write n volumes plus one annotation index to out_dir; returns the volume paths."""
    check_synth_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    paths = []
    for i in range(n):
        name = f"vol_{i:03d}"
        volume = generate_volume(rng, cfg, name)
        path = out_dir / f"{name}{VOLUME_SUFFIX}"
        write_volume(path, volume)
        entries.extend(box.to_dict(name) for box in volume.boxes)
        paths.append(path)
    write_annotations(out_dir, entries)
    logger.info("Generated %d volumes with %d lesions in %s", n, len(entries), out_dir)
    return paths


def synth_dataset(settings, root):
    """data/train and data/test under root, from independent child seeds."""
    train_seq, test_seq = np.random.SeedSequence(settings.seed).spawn(2)
    cfg = settings.synth
    root = Path(root)
    train = synth_generate(cfg, cfg.train_volumes, root / "train", train_seq)
    test = synth_generate(cfg, cfg.test_volumes, root / "test", test_seq)
    log_event("synth", stage="data", details={"train": len(train), "test": len(test),
                                              "dims": list(cfg.dims), "seed": settings.seed})
    return train, test
