"""
Objective and optimizer tests for AHNET
"""

import math

import numpy as np
import pytest

from core import tensor as T
from core.objectives import (AdamState, Box3D, FocalSpec, HeatmapSpec, ParamGroup, adam_step, cross_entropy,
                             focal_ce, focal_l2, focal_value, focal_weight, gaussian_heatmap, l2_loss, zero_grads)
from utils import ConfigError, ShapeError


# ============================================================
# BOXES AND HEATMAPS
# ============================================================


def test_box_containment_is_closed():
    box = Box3D((10, 10, 4), (4, 4, 2))
    assert box.contains((12, 8, 5))
    assert not box.contains((12.5, 10, 4))
    with pytest.raises(ShapeError):
        Box3D((1, 1, 1), (0, 1, 1))


def test_heatmap_peaks_at_box_center():
    box = Box3D((10, 12, 3), (8, 8, 4))
    hm = gaussian_heatmap([box], (24, 24, 8))
    assert np.unravel_index(np.argmax(hm), hm.shape) == (10, 12, 3)
    assert hm[10, 12, 3] == pytest.approx(1.0)
    # sigma is extent / k = 2 voxels in x
    assert hm[12, 12, 3] == pytest.approx(math.exp(-0.5), rel=1e-5)


def test_heatmap_paper_mode_uses_normalized_peak():
    box = Box3D((5, 5, 2), (4, 4, 4))
    hm = gaussian_heatmap([box], (12, 12, 6), HeatmapSpec(k=4, mode="paper"))
    assert hm[5, 5, 2] == pytest.approx(1.0 / math.sqrt((2 * math.pi) ** 3), rel=1e-5)


def test_heatmap_sums_overlapping_lesions():
    boxes = [Box3D((6, 6, 2), (4, 4, 2)), Box3D((7, 6, 2), (4, 4, 2))]
    hm = gaussian_heatmap(boxes, (14, 14, 5))
    assert hm.max() > 1.0


def test_heatmap_rejects_box_outside_volume():
    with pytest.raises(ShapeError):
        gaussian_heatmap([Box3D((30, 1, 1), (2, 2, 2))], (10, 10, 4))


# ============================================================
# REGRESSION LOSSES
# ============================================================


def test_focal_worked_value():
    spec = FocalSpec(gamma=2, d_max=100)
    assert focal_value(10.0, spec) == pytest.approx(2.5, abs=1e-9)


def test_focal_weight_clamps():
    spec = FocalSpec(gamma=2, d_max=100)
    assert focal_weight(np.float64(1e6), spec) == pytest.approx(1.0)
    assert focal_weight(np.float64(0.0), spec) < 1e-10


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
def test_focal_l2_never_decreases_with_d(gamma):
    spec = FocalSpec(gamma=gamma, d_max=100, mode="batch")
    target = np.zeros((1, 1, 1, 1, 1), dtype=np.float32)
    ds = np.linspace(1.0, 100.0, 2000)
    values = [focal_value(d, spec) for d in ds]
    assert all(b >= a for a, b in zip(values, values[1:]))
    losses = [focal_l2(T.Tensor(np.full((1, 1, 1, 1, 1), np.sqrt(d))), target, spec).item() for d in ds[::20]]
    assert all(b >= a for a, b in zip(losses, losses[1:]))
    assert focal_value(100.0, spec) == pytest.approx(100.0)


def test_focal_l2_with_gamma_zero_is_l2_bit_exactly(rng):
    pred = T.Tensor(rng.standard_normal((2, 1, 4, 4, 3)))
    target = rng.standard_normal((2, 1, 4, 4, 3)).astype(np.float32)
    assert focal_l2(pred, target, FocalSpec(gamma=0)).data.tobytes() == l2_loss(pred, target).data.tobytes()


def test_focal_down_weights_easy_voxels():
    spec = FocalSpec(gamma=2, d_max=1e4, scale=100.0)
    target = np.zeros((1, 1, 2, 1, 1), dtype=np.float32)
    pred = T.Tensor(np.array([0.02, 0.9]).reshape(1, 1, 2, 1, 1))
    plain = FocalSpec(gamma=0, d_max=1e4, scale=100.0)
    easy_share = focal_l2(pred, target, spec).item() / focal_l2(pred, target, plain).item()
    assert easy_share < 1.0


@pytest.mark.parametrize("mode", ["voxel", "batch"])
def test_focal_l2_gradients(float64, rng, mode):
    pred = T.Tensor(rng.uniform(0.2, 1.0, (1, 1, 3, 3, 2)))
    target = np.zeros((1, 1, 3, 3, 2))
    spec = FocalSpec(gamma=2, d_max=1e4, scale=10.0, mode=mode)
    assert T.finite_difference_check(lambda: focal_l2(pred, target, spec), [pred]) < 1e-5


def test_l2_gradients(float64, rng):
    pred = T.Tensor(rng.standard_normal((2, 1, 3, 3)))
    target = rng.standard_normal((2, 1, 3, 3))
    assert T.finite_difference_check(lambda: l2_loss(pred, target), [pred]) < 1e-5


def test_l2_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        l2_loss(T.Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


@pytest.mark.parametrize("field,value", [("gamma", -1), ("d_max", 1.0), ("scale", 0), ("mode", "pixel")])
def test_invalid_focal_specs(field, value):
    with pytest.raises(ConfigError):
        FocalSpec(**{field: value})


# ============================================================
# CLASSIFICATION LOSSES
# ============================================================


def test_focal_ce_worked_value(float64):
    logits = T.Tensor(np.zeros((1, 2, 1, 1)))
    labels = np.zeros((1, 1, 1), dtype=np.int64)
    assert focal_ce(logits, labels, 2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-9)


def test_focal_ce_with_gamma_zero_is_cross_entropy_bit_exactly(rng):
    logits = T.Tensor(rng.standard_normal((2, 2, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4))
    a = focal_ce(logits, labels, 0.0, (1.0, 3.0)).data.tobytes()
    b = cross_entropy(logits, labels, (1.0, 3.0)).data.tobytes()
    assert a == b


def test_cross_entropy_class_weights_form_a_weighted_mean():
    logits = T.Tensor(np.zeros((1, 2, 2, 1)))
    labels = np.array([[[0], [1]]])
    # both voxels have loss ln 2 so any weighting keeps the mean at ln 2
    assert cross_entropy(logits, labels, (1.0, 5.0)).item() == pytest.approx(math.log(2), rel=1e-6)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ShapeError):
        cross_entropy(T.Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_classification_gradients(float64, rng, gamma):
    logits = T.Tensor(rng.standard_normal((2, 3, 3, 2)))
    labels = rng.integers(0, 3, (2, 3, 2))
    err = T.finite_difference_check(lambda: focal_ce(logits, labels, gamma, (1.0, 2.0, 0.5)), [logits])
    assert err < 1e-5


# ============================================================
# ADAM
# ============================================================


def test_adam_first_step_moves_by_learning_rate():
    p = T.Tensor(np.array([1.0, -1.0, 0.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0, 0.0], dtype=np.float32)
    state = AdamState()
    adam_step([ParamGroup("all", 0.1, [("p", p)])], state)
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.0], atol=1e-6)
    assert state.t == 1 and p.version == 1


def test_adam_groups_use_their_own_rates_and_skip_missing_grads():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = T.Tensor(np.ones(2), requires_grad=True)
    c = T.Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2, dtype=np.float32)
    b.grad = np.ones(2, dtype=np.float32)
    adam_step([ParamGroup("enc", 0.001, [("a", a), ("c", c)]), ParamGroup("dec", 0.01, [("b", b)])], AdamState())
    np.testing.assert_allclose(a.data, 0.999, atol=1e-6)
    np.testing.assert_allclose(b.data, 0.99, atol=1e-6)
    assert np.array_equal(c.data, np.ones(2))
    zero_grads([("a", a), ("b", b)])
    assert a.grad is None and b.grad is None


def test_adam_minimizes_a_quadratic(rng):
    target = rng.standard_normal(5)
    p = T.Tensor(np.zeros(5), requires_grad=True)
    state = AdamState()
    for _ in range(500):
        with T.GradTape() as tape:
            loss = l2_loss(p, target)
        zero_grads([("p", p)])
        tape.backward(loss)
        adam_step([ParamGroup("p", 0.05, [("p", p)])], state)
    np.testing.assert_allclose(p.data, target, atol=1e-2)
