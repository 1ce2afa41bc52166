"""
Storage module for AHNET
Volume files, dataset annotations and checkpoints; every format is
little-endian and byte-for-byte reproducible.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from utils import CheckpointError, VolumeFormatError, get_error_message

logger = logging.getLogger("ahnet.store")

VOLUME_MAGIC = b"AVOL1\n"
CHECKPOINT_MAGIC = b"AHCKPT1\n"
VOLUME_HEADER = struct.Struct("<3I3fB")
ALIGN = 64
ANNOTATIONS_FILE = "annotations.json"
VOLUME_SUFFIX = ".avol"


# ============================================================
# VOLUMES
# ============================================================


@dataclass
class Volume:
    """Voxel grid indexed [x, y, z]; z is the coarse between-slice axis."""
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray = None
    boxes: list = field(default_factory=list)
    name: str = ""

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)


def _atomic_write(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_volume(path, volume):
    data = np.asarray(volume.data)
    if data.ndim != 3 or min(data.shape) < 1:
        raise VolumeFormatError(f"Volume data must be a non-empty X×Y×Z grid, got shape {data.shape}")
    has_mask = volume.mask is not None
    if has_mask and np.asarray(volume.mask).shape != data.shape:
        raise VolumeFormatError("Mask dims differ from volume dims")
    parts = [VOLUME_MAGIC,
             VOLUME_HEADER.pack(*data.shape, *(float(s) for s in volume.spacing), int(has_mask)),
             data.astype("<f4").tobytes(order="F")]
    if has_mask:
        parts.append(np.asarray(volume.mask).astype(np.uint8).tobytes(order="F"))
    _atomic_write(path, b"".join(parts))


def read_volume(path):
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(VOLUME_MAGIC):
        raise VolumeFormatError(get_error_message('bad_magic', path=path))
    head_end = len(VOLUME_MAGIC) + VOLUME_HEADER.size
    if len(raw) < head_end:
        raise VolumeFormatError(get_error_message('truncated', path=path, expected=head_end, found=len(raw)))
    x, y, z, rx, ry, rz, has_mask = VOLUME_HEADER.unpack_from(raw, len(VOLUME_MAGIC))
    count = x * y * z
    expected = head_end + 4 * count + (count if has_mask else 0)
    if len(raw) != expected:
        raise VolumeFormatError(get_error_message('truncated', path=path, expected=expected, found=len(raw)))
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=head_end).reshape((x, y, z), order="F")
    mask = None
    if has_mask:
        mask = np.frombuffer(raw, dtype=np.uint8, count=count, offset=head_end + 4 * count)
        mask = mask.reshape((x, y, z), order="F").copy()
    return Volume(np.ascontiguousarray(data, dtype=np.float32), (rx, ry, rz), mask, [], path.stem)


# ============================================================
# DATASETS
# ============================================================


def write_annotations(directory, entries):
    """entries: [{volume, center: [x,y,z], extent: [w,h,d]}]"""
    payload = json.dumps(entries, indent=2).encode("utf-8") + b"\n"
    _atomic_write(Path(directory) / ANNOTATIONS_FILE, payload)


def read_annotations(directory):
    path = Path(directory) / ANNOTATIONS_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise VolumeFormatError(f"No {ANNOTATIONS_FILE} in {directory}")
    except ValueError as e:
        raise VolumeFormatError(f"{path} is not valid JSON: {e}")


def list_volumes(directory):
    return sorted(Path(directory).glob(f"*{VOLUME_SUFFIX}"))


def load_dataset(directory):
    """All volumes of a dataset directory in name order, boxes attached."""
    from core.objectives import Box3D

    paths = list_volumes(directory)
    if not paths:
        raise VolumeFormatError(f"No {VOLUME_SUFFIX} files in {directory}")
    volumes = [read_volume(p) for p in paths]
    by_name = {v.name: v for v in volumes}
    for entry in read_annotations(directory):
        volume = by_name.get(entry["volume"])
        if volume is None:
            raise VolumeFormatError(f"Annotation refers to unknown volume {entry['volume']}")
        volume.boxes.append(Box3D(tuple(entry["center"]), tuple(entry["extent"])))
    return volumes


# ============================================================
# CHECKPOINTS
# ============================================================


@dataclass
class Checkpoint:
    """Ordered name -> array store; meta is in-memory bookkeeping and is not persisted."""
    tensors: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)


def checkpoint_from_model(model, **meta):
    return Checkpoint({k: np.array(v, copy=True) for k, v in model.state().items()}, dict(meta))


def _aligned(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def checkpoint_bytes(ckpt):
    manifest = []
    blobs = []
    offset = 0
    for name, value in ckpt.tensors.items():
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        offset = _aligned(offset)
        manifest.append({"name": name, "dtype": "f32", "shape": [int(s) for s in np.shape(value)],
                         "offset": offset, "length": len(blob)})
        blobs.append((offset, blob))
        offset += len(blob)
    manifest_bytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    header = CHECKPOINT_MAGIC + struct.pack("<Q", len(manifest_bytes)) + manifest_bytes
    data = bytearray(offset)
    for start, blob in blobs:
        data[start:start + len(blob)] = blob
    return header + b"\0" * (_aligned(len(header)) - len(header)) + bytes(data)


def save_checkpoint(path, ckpt):
    _atomic_write(path, checkpoint_bytes(ckpt))
    logger.info("Saved checkpoint %s (%d tensors)", path, len(ckpt))


def load_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(get_error_message('bad_magic', path=path))
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(get_error_message('truncated', path=path, expected=pos + 8, found=len(raw)))
    (manifest_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + manifest_len:
        raise CheckpointError(get_error_message('truncated', path=path, expected=pos + manifest_len, found=len(raw)))
    try:
        manifest = json.loads(raw[pos:pos + manifest_len].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"Checkpoint manifest in {path} is unreadable: {e}")
    data_start = _aligned(pos + manifest_len)

    tensors = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{entry['name']}: unsupported dtype {entry.get('dtype')}")
        if entry["length"] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{entry['name']}: manifest length {entry['length']} does not match shape {shape}")
        start = data_start + entry["offset"]
        end = start + entry["length"]
        if end > len(raw):
            raise CheckpointError(get_error_message('truncated', path=path, expected=end, found=len(raw)))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=entry["length"] // 4,
                                               offset=start).reshape(shape).astype(np.float32)
    return Checkpoint(tensors)
