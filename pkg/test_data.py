"""
Dataset tests for AHNET
Synthetic volumes, patch sampling, augmentation and prefetching.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from core.objectives import Box3D
from core.sampling import PatchSampler, Prefetcher, apply_transform, augment, transform_point, truncate_intensity
from core.synth import check_synth_config, synth_generate
from settings import SynthConfig, TrainConfig
from store import Volume, load_dataset
from utils import ConfigError, SamplingError, set_run_log

BOX = Box3D((10, 12, 4), (4, 4, 2))


@pytest.fixture
def volumes(rng):
    data = rng.standard_normal((32, 32, 8)).astype(np.float32)
    mask = np.zeros((32, 32, 8), dtype=np.uint8)
    mask[8:13, 10:15, 3:6] = 1
    return [Volume(data, mask=mask, boxes=[BOX], name="vol_000")]


def _cfg(**changes):
    return replace(TrainConfig(patch=(16, 16, 4), batch_size=2, augment=False), **changes)


def _holds(draw, patch, center=(10, 12, 4)):
    return all(o <= c < o + p for o, c, p in zip(draw.origin, center, patch))


# ============================================================
# SAMPLING
# ============================================================


def test_all_positive_draws_hold_a_lesion_centre(volumes):
    sampler = PatchSampler(volumes, _cfg(positive_fraction=1.0), seed=1)
    for _ in range(50):
        draw = sampler.draw()
        assert draw.positive and _holds(draw, (16, 16, 4))
        assert draw.image.shape == (16, 16, 4)


def test_negative_draws_hold_no_lesion_centre(volumes):
    sampler = PatchSampler(volumes, _cfg(positive_fraction=0.0), seed=2)
    for _ in range(50):
        draw = sampler.draw()
        assert not draw.positive and not _holds(draw, (16, 16, 4))


def test_positive_fraction_is_respected(volumes):
    sampler = PatchSampler(volumes, _cfg(positive_fraction=0.7), seed=3)
    share = np.mean([sampler.draw().positive for _ in range(2000)])
    assert share == pytest.approx(0.7, abs=0.03)


def test_same_seed_gives_same_patches(volumes):
    a = PatchSampler(volumes, _cfg(augment=True), seed=4)
    b = PatchSampler(volumes, _cfg(augment=True), seed=4)
    for _ in range(5):
        xa, ya = a.batch()
        xb, yb = b.batch()
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


def test_volumetric_batches(volumes):
    x, y = PatchSampler(volumes, _cfg(), seed=5).batch()
    assert x.shape == (2, 1, 16, 16, 4) and y.shape == (2, 1, 16, 16, 4)
    x, y = PatchSampler(volumes, _cfg(), task="segmentation", seed=5).batch()
    assert y.shape == (2, 16, 16, 4) and y.dtype == np.int64


def test_slice_triple_batches_center_on_the_lesion_slice(volumes):
    sampler = PatchSampler(volumes, _cfg(positive_fraction=1.0), seed=6, mode="2d")
    draw = sampler.draw()
    assert draw.image.shape == (16, 16, 3) and draw.target.shape == (16, 16, 1)
    ox, oy = draw.origin
    assert np.array_equal(draw.image[..., 1], volumes[0].data[ox:ox + 16, oy:oy + 16, 4])
    x, y = sampler.batch()
    assert x.shape == (2, 3, 16, 16) and y.shape == (2, 1, 16, 16)


def test_dataset_without_lesions_cannot_draw_positives(rng):
    empty = [Volume(rng.standard_normal((32, 32, 8)).astype(np.float32), name="vol_000")]
    with pytest.raises(SamplingError, match="no lesions"):
        PatchSampler(empty, _cfg(positive_fraction=0.5))
    PatchSampler(empty, _cfg(positive_fraction=0.0)).draw()


def test_patch_larger_than_volume_is_rejected(volumes):
    with pytest.raises(SamplingError):
        PatchSampler(volumes, _cfg(patch=(16, 16, 16)))


def test_intensity_truncation():
    data = np.array([-500.0, 0.0, 100.0, 900.0])
    np.testing.assert_allclose(truncate_intensity(data, (0.0, 200.0)), [0.0, 0.0, 0.5, 1.0])
    assert truncate_intensity(data, ()) is data
    with pytest.raises(SamplingError):
        truncate_intensity(data, (5.0, 5.0))


# ============================================================
# AUGMENTATION
# ============================================================


def test_identity_transform_returns_an_equal_copy(rng):
    patch = rng.standard_normal((8, 8, 4))
    out = apply_transform(patch, {"angle": 0.0, "scale": (1.0, 1.0, 1.0), "mirror": False}, 1)
    assert np.array_equal(out, patch) and out is not patch


def test_mirror_twice_is_identity(rng):
    patch = rng.standard_normal((8, 8, 4))
    params = {"angle": 0.0, "scale": (1.0, 1.0, 1.0), "mirror": True}
    once = apply_transform(patch, params, 1)
    assert np.array_equal(once[::-1], patch)
    assert np.array_equal(apply_transform(once, params, 1), patch)


def test_masks_stay_binary_under_rotation():
    mask = np.zeros((16, 16, 4), dtype=np.uint8)
    mask[4:12, 6:10] = 1
    out = apply_transform(mask, {"angle": 17.0, "scale": (1.1, 0.9, 1.0), "mirror": False}, 0)
    assert set(np.unique(out)) <= {0, 1}


def test_augmented_positives_keep_a_centre_in_the_window():
    cfg = TrainConfig(rotation=45.0, scaling=0.3)
    patch = np.zeros((16, 16, 4), dtype=np.float32)
    for seed in range(20):
        _, _, params = augment(patch, patch, np.random.default_rng(seed), cfg, keep=[(0, 0, 1)])
        moved = transform_point((0, 0, 1), patch.shape, params)
        assert all(0 <= int(np.floor(c + 0.5)) < s for c, s in zip(moved, patch.shape))


def test_transform_point_follows_the_mirror():
    params = {"angle": 0.0, "scale": (1.0, 1.0, 1.0), "mirror": True}
    np.testing.assert_allclose(transform_point((2, 5, 1), (8, 8, 4), params), [5, 5, 1])


def test_augment_parameters_go_to_the_run_log(tmp_path, rng):
    set_run_log(tmp_path)
    patch = rng.standard_normal((8, 8, 4))
    _, _, params = augment(patch, patch, rng, TrainConfig())
    entry = json.loads((tmp_path / "run_log.jsonl").read_text().splitlines()[-1])
    assert entry["action"] == "augment"
    assert entry["details"]["angle"] == pytest.approx(params["angle"])
    assert entry["details"]["mirror"] == params["mirror"]


# ============================================================
# PREFETCH
# ============================================================


def _counter():
    state = {"n": 0}

    def produce():
        state["n"] += 1
        return state["n"]

    return produce


@pytest.mark.parametrize("depth", [0, 3])
def test_prefetcher_preserves_the_sequence(depth):
    with Prefetcher(_counter(), depth=depth) as queue:
        assert [queue.next() for _ in range(10)] == list(range(1, 11))


def test_prefetcher_reraises_producer_errors():
    def produce():
        raise SamplingError("boom")

    with Prefetcher(produce, depth=2) as queue:
        with pytest.raises(SamplingError, match="boom"):
            queue.next()


def test_one_prefetcher_across_two_phases_matches_synchronous_draws(volumes):
    cfg = _cfg(augment=True)
    sync = PatchSampler(volumes, cfg, seed=8)
    expected = [sync.batch()[0] for _ in range(6)]
    sampler = PatchSampler(volumes, cfg, seed=8)
    with Prefetcher(sampler.batch, depth=2) as feed:
        first = [feed.next()[0] for _ in range(3)]
        second = [feed.next()[0] for _ in range(3)]
    for a, b in zip(expected, first + second):
        assert np.array_equal(a, b)


def test_close_waits_for_the_producer(volumes):
    sampler = PatchSampler(volumes, _cfg(augment=True), seed=9)
    with Prefetcher(sampler.batch, depth=2) as feed:
        feed.next()
    state = sampler.rng.bit_generator.state
    time.sleep(0.2)
    assert sampler.rng.bit_generator.state == state


def test_producer_error_behind_a_full_queue():
    calls = {"n": 0}

    def produce():
        calls["n"] += 1
        if calls["n"] > 1:
            raise SamplingError("late")
        return calls["n"]

    with Prefetcher(produce, depth=1) as feed:
        assert feed.next() == 1
        with pytest.raises(SamplingError, match="late"):
            feed.next()


# ============================================================
# SYNTHETIC DATA
# ============================================================


SMALL = SynthConfig(dims=(32, 32, 8), train_volumes=2, test_volumes=1, lesions_min=1, lesions_max=3,
                    extent_xy=(6.0, 8.0), extent_z=(2.0, 3.0))


def test_synth_is_byte_identical_for_a_seed(tmp_path):
    a = synth_generate(SMALL, 2, tmp_path / "a", seed=42)
    b = synth_generate(SMALL, 2, tmp_path / "b", seed=42)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "a" / "annotations.json").read_bytes() == (tmp_path / "b" / "annotations.json").read_bytes()


def test_synth_boxes_fit_and_cover_the_mask(tmp_path):
    synth_generate(SMALL, 3, tmp_path, seed=1)
    for volume in load_dataset(tmp_path):
        assert 1 <= len(volume.boxes) <= 3
        for box in volume.boxes:
            assert box.fits(volume.dims)
            assert volume.mask[tuple(int(c) for c in box.center)] == 1


@pytest.mark.parametrize("changes", [
    {"extent_xy": (6.0, 40.0)},
    {"lesions_min": 3, "lesions_max": 1},
    {"spacing": (1.0, 1.0, 0.5)},
])
def test_synth_config_checks(changes):
    with pytest.raises(ConfigError):
        check_synth_config(replace(SMALL, **changes))
