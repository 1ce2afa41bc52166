"""
Storage tests for AHNET
Volume files, annotation indexes and checkpoint archives.
"""

import json
import struct

import numpy as np
import pytest

from core.objectives import Box3D
from store import (ALIGN, CHECKPOINT_MAGIC, Checkpoint, Volume, load_checkpoint, load_dataset, read_volume,
                   save_checkpoint, write_annotations, write_volume)
from utils import CheckpointError, VolumeFormatError


def _volume(rng, with_mask=True):
    data = rng.standard_normal((5, 4, 3)).astype(np.float32)
    mask = (data > 0).astype(np.uint8) if with_mask else None
    return Volume(data, (0.5, 0.5, 4.0), mask, [], "vol_000")


def test_volume_round_trip_keeps_axis_order(tmp_path, rng):
    volume = _volume(rng)
    path = tmp_path / "vol_000.avol"
    write_volume(path, volume)
    back = read_volume(path)
    assert back.dims == (5, 4, 3)
    assert np.array_equal(back.data, volume.data)
    assert np.array_equal(back.mask, volume.mask)
    assert back.spacing == (0.5, 0.5, 4.0)
    assert back.name == "vol_000"


def test_volume_voxels_are_stored_x_fastest(tmp_path):
    data = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    path = tmp_path / "v.avol"
    write_volume(path, Volume(data))
    raw = path.read_bytes()
    body = np.frombuffer(raw[-data.size * 4:], dtype="<f4")
    assert body[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]


def test_volume_without_mask(tmp_path, rng):
    path = tmp_path / "v.avol"
    write_volume(path, _volume(rng, with_mask=False))
    assert read_volume(path).mask is None


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "v.avol"
    path.write_bytes(b"NOTAVOL" + b"\0" * 64)
    with pytest.raises(VolumeFormatError, match="bad magic"):
        read_volume(path)


def test_truncated_volume_is_rejected(tmp_path, rng):
    path = tmp_path / "v.avol"
    write_volume(path, _volume(rng))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(VolumeFormatError, match="truncated"):
        read_volume(path)


def test_write_volume_checks_mask_dims(tmp_path, rng):
    volume = _volume(rng)
    volume.mask = np.zeros((2, 2, 2), dtype=np.uint8)
    with pytest.raises(VolumeFormatError):
        write_volume(tmp_path / "v.avol", volume)


def test_dataset_attaches_boxes_by_volume_name(tmp_path, rng):
    for name in ("vol_001", "vol_000"):
        v = _volume(rng)
        v.name = name
        write_volume(tmp_path / f"{name}.avol", v)
    write_annotations(tmp_path, [Box3D((2, 2, 1), (2, 2, 1)).to_dict("vol_001")])
    volumes = load_dataset(tmp_path)
    assert [v.name for v in volumes] == ["vol_000", "vol_001"]
    assert volumes[0].boxes == []
    assert volumes[1].boxes == [Box3D((2.0, 2.0, 1.0), (2.0, 2.0, 1.0))]


def test_annotation_for_unknown_volume_is_rejected(tmp_path, rng):
    write_volume(tmp_path / "vol_000.avol", _volume(rng))
    write_annotations(tmp_path, [Box3D((2, 2, 1), (2, 2, 1)).to_dict("vol_404")])
    with pytest.raises(VolumeFormatError, match="vol_404"):
        load_dataset(tmp_path)


def test_empty_dataset_directory_is_rejected(tmp_path):
    with pytest.raises(VolumeFormatError):
        load_dataset(tmp_path)


# ============================================================
# CHECKPOINTS
# ============================================================


def _checkpoint(rng):
    return Checkpoint({
        "stem.conv.weight": rng.standard_normal((4, 1, 7, 7, 3)).astype(np.float32),
        "stem.bn.running_mean": rng.standard_normal(4).astype(np.float32),
        "stage1.block0.conv1.weight": rng.standard_normal((3, 4, 1, 1, 1)).astype(np.float32),
    })


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    ckpt = _checkpoint(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.names() == ckpt.names()
    for name, value in ckpt.tensors.items():
        assert back.tensors[name].tobytes() == value.tobytes()
    first = path.read_bytes()
    save_checkpoint(path, back)
    assert path.read_bytes() == first


def test_checkpoint_manifest_and_alignment(tmp_path, rng):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _checkpoint(rng))
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    (length,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    manifest = json.loads(raw[start:start + length])
    assert len(manifest) == 3
    assert all(entry["offset"] % ALIGN == 0 for entry in manifest)
    assert manifest[0]["shape"] == [4, 1, 7, 7, 3]


def test_checkpoint_errors(tmp_path, rng):
    path = tmp_path / "model.ckpt"
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage!" * 4)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)
    save_checkpoint(path, _checkpoint(rng))
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
