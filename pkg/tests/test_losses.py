import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylaax import losses
from phylaax.tensor import ShapeError, Tensor

# independent oracle: -alpha * (1 - p)^gamma * log(p) at p = sigmoid(0) = 1/2
FOCAL_AT_ZERO = -0.25 * 0.5 ** 2 * math.log(0.5)


def test_focal_unit_value():
    assert FOCAL_AT_ZERO == pytest.approx(0.0433217, abs=1e-7)
    out = losses.focal_loss(Tensor(np.array([0.0])), [1.0], losses.LossConfig(focal_alpha=0.25, focal_gamma=2.0))
    assert out.item() == pytest.approx(FOCAL_AT_ZERO, abs=1e-12)


def test_focal_with_gamma_zero_is_weighted_bce():
    z = np.array([-1.3, 0.4, 2.2])
    y = np.array([1.0, 0.0, 1.0])
    cfg = losses.LossConfig(focal_alpha=0.5, focal_gamma=0.0)
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert losses.focal_loss(Tensor(z), y, cfg).item() == pytest.approx(0.5 * bce.mean(), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 700), st.sampled_from([0.0, 1.0]))
def test_focal_is_finite_and_nonnegative(z, y):
    out = losses.focal_loss(Tensor(np.array([z])), [y]).item()
    assert math.isfinite(out) and out >= 0


def test_focal_rejects_empty_batch():
    with pytest.raises(ValueError):
        losses.focal_loss(Tensor(np.zeros(0)), [])


def field(seed=0, shape=(2, 3, 1, 6, 7)):
    return np.random.default_rng(seed).random(shape)


def test_resonance_identical_fields_is_zero():
    for seed in range(20):
        p = field(seed)
        assert losses.resonance_loss(Tensor(p), None, p_avg=p).item() == 0.0


def test_resonance_antiparallel_fields_is_two():
    for seed in range(20):
        p = field(seed)
        assert losses.resonance_loss(Tensor(-p), None, p_avg=p).item() == 2.0
    assert losses.resonance_loss(Tensor(-3.0 * p), None, p_avg=p).item() == pytest.approx(2.0, abs=1e-12)


def test_resonance_constant_field_is_one():
    p = field(2)
    assert losses.resonance_loss(Tensor(np.full_like(p, 0.4)), None, p_avg=p).item() == 1.0
    assert losses.resonance_loss(Tensor(p), None, p_avg=np.zeros_like(p)).item() == 1.0


def test_resonance_from_raw_physics_uses_normalised_average():
    rng = np.random.default_rng(3)
    phys = rng.normal(size=(1, 2, 3, 5, 5))
    avg = losses.physics_average(phys)
    assert avg.shape == (1, 2, 1, 5, 5)
    assert 0.0 <= avg.min() and avg.max() <= 1.0
    # scale invariance of the per-channel normalisation
    np.testing.assert_allclose(losses.physics_average(7.0 * phys + 2.0), avg, atol=1e-12)
    assert losses.resonance_loss(Tensor(avg), phys).item() == pytest.approx(0.0, abs=1e-12)


def test_resonance_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.resonance_loss(Tensor(np.zeros((1, 1, 1, 4, 4))), None, p_avg=np.zeros((1, 1, 1, 4, 5)))


def test_spatial_gradient_matches_numpy():
    x = np.random.default_rng(4).normal(size=(2, 5, 6))
    gx, gy = losses.spatial_gradient(x)
    np.testing.assert_allclose(gx, np.gradient(x, axis=-1), atol=1e-12)
    np.testing.assert_allclose(gy, np.gradient(x, axis=-2), atol=1e-12)


def test_aux_mask_loss_matches_bce():
    m = np.full((1, 1, 1, 2, 2), 0.8)
    mask = np.zeros((1, 1, 4, 4))
    mask[..., :2, :2] = 1.0
    expected = -(math.log(0.8) + 3 * math.log(0.2)) / 4
    assert losses.aux_mask_loss(Tensor(m), mask[:, :, None]).item() == pytest.approx(expected, rel=1e-12)


def test_downsample_mask_area_vote():
    mask = np.zeros((4, 4))
    mask[:2, :1] = 1  # half of the top-left 2x2 cell
    out = losses.downsample_mask(mask, (2, 2))
    np.testing.assert_array_equal(out, [[1, 0], [0, 0]])
    with pytest.raises(ShapeError):
        losses.downsample_mask(mask, (3, 3))


def test_total_loss_weights_and_skips():
    cfg = losses.LossConfig(aux_mask_weight=0.5, resonance_weight=0.3)
    f, a, r = Tensor(np.array(1.0)), Tensor(np.array(2.0)), Tensor(np.array(4.0))
    assert losses.total_loss(f, a, r, cfg).item() == pytest.approx(1 + 1 + 1.2)
    assert losses.total_loss(f, None, None, cfg).item() == 1.0
    with pytest.raises(ValueError):
        losses.LossConfig(aux_mask_weight=-1.0)
