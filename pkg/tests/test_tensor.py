import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from gradcases import INSTANCES, OPS, TOL, worst_error
from phylaax import tensor as tn
from phylaax.tensor import ShapeError, Tensor


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    errs = [worst_error(OPS[name], seed) for seed in range(INSTANCES)]
    assert max(errs) < TOL, errs


def test_backward_accumulates_on_leaves_and_frees_intermediates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = x * 3.0
    loss = tn.sum_(mid * mid)
    loss.backward()
    first = x.grad.copy()
    assert mid.grad is None
    tn.sum_(x * x).backward()
    np.testing.assert_allclose(x.grad, first + 2 * x.data)


def test_shared_subexpression_collects_both_paths():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x
    (y * y + y).backward()  # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == pytest.approx(4 * 8 + 4)


def test_backward_rejects_non_scalar_and_constant_losses():
    with pytest.raises(ValueError):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()
    with pytest.raises(ValueError):
        Tensor(np.array(1.0)).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with tn.no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()


def test_dropout_is_identity_outside_training():
    x = Tensor(np.arange(6.0))
    assert tn.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ValueError):
        tn.dropout(x, 1.0, np.random.default_rng(0), training=True)


@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv2d_matches_scipy_correlation(padding):
    rng = np.random.default_rng(padding)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = tn.conv2d(Tensor(x), Tensor(w), padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    ref = np.stack([
        np.stack([sum(correlate(xp[n, c], w[o, c], mode="valid") for c in range(3)) for o in range(4)])
        for n in range(2)
    ])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        tn.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        tn.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_causal_conv_never_looks_ahead():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 12))
    w = Tensor(rng.normal(size=(3, 2, 3)))
    base = tn.conv1d_causal(Tensor(x), w, dilation=2).data
    x2 = x.copy()
    x2[..., 7:] += 5.0
    moved = tn.conv1d_causal(Tensor(x2), w, dilation=2).data
    np.testing.assert_array_equal(base[..., :7], moved[..., :7])


def test_receptive_field_matches_impulse_probe():
    # stack three causal layers and find the earliest input that reaches the last output
    k, dils = 7, (1, 2, 4)
    t = 64
    x = Tensor(np.zeros((1, 1, t)), requires_grad=True)
    h = x
    for d in dils:
        h = tn.conv1d_causal(h, Tensor(np.ones((1, 1, k))), dilation=d)
    tn.sum_(tn.getitem(h, (0, 0, t - 1))).backward()
    reach = np.count_nonzero(x.grad[0, 0])
    assert reach == tn.receptive_field(k, dils) == 43


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_a_distribution(vals):
    out = tn.softmax(Tensor(np.array(vals))).data
    assert np.all(out >= 0)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-800, 800))
def test_log_sigmoid_is_finite_everywhere(v):
    out = tn.log_sigmoid(Tensor(np.array(v))).data
    assert np.isfinite(out) and out <= 0


def test_broadcast_gradient_reduces_to_operand_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    tn.sum_(a * b).backward()
    assert b.grad.shape == (1, 4)
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))
