import math

import numpy as np
import pytest
from scipy.stats import norm

from phylaax import adversarial as adv
from phylaax.models import Branch, BranchConfig
from phylaax.training import physics_batch

EPS, STEP = 0.02, 0.002


@pytest.fixture(scope="module")
def model():
    return Branch(BranchConfig(kind="causal-conv", channels=4, hidden=8), seed=0)


@pytest.fixture(scope="module")
def batch(clips8):
    return clips8.frames[:3], clips8.labels[:3].astype(np.int64)


def pfn(frames):
    return physics_batch()(frames)


def test_pgd_iterates_stay_in_ball_and_box(model, batch):
    frames, labels = batch
    frames = frames.copy()
    frames[0, :, :2] = 0.0  # pixels on the box edges
    frames[1, :, -2:] = 1.0
    its = []
    out = adv.pgd(model, frames, labels, adv.AttackConfig("pgd", EPS, STEP, 4, seed=1), pfn, iterates=its)
    assert len(its) == 4 and out is not None
    for x in its:
        # bounds as the projection forms them; |x - x0| itself can round one ulp past eps
        assert np.all((x >= frames - EPS) & (x <= frames + EPS))
        assert np.all((x >= 0.0) & (x <= 1.0))


def test_one_step_pgd_is_fgsm_bit_for_bit(model, batch):
    frames, labels = batch
    cfg = adv.AttackConfig("pgd", EPS, EPS, 1)
    a = adv.fgsm(model, frames, labels, adv.AttackConfig("fgsm", EPS, EPS, 1), pfn)
    b = adv.pgd(model, frames, labels, cfg, pfn, zero_init=True)
    assert a.tobytes() == b.tobytes()


def test_attacks_move_pixels(model, batch):
    frames, labels = batch
    x = adv.fgsm(model, frames, labels, adv.AttackConfig("fgsm", EPS, EPS, 1), pfn)
    assert np.max(np.abs(x - frames)) == pytest.approx(EPS, abs=1e-15)


def test_zero_epsilon_is_identity(model, batch):
    frames, labels = batch
    cfg = adv.AttackConfig("pgd", 0.0, 0.001, 3)
    np.testing.assert_array_equal(adv.pgd(model, frames, labels, cfg, pfn), frames)
    np.testing.assert_array_equal(adv.fgsm(model, frames, labels, cfg, pfn), frames)


def test_pgd_is_seeded(model, batch):
    frames, labels = batch
    cfg = adv.AttackConfig("pgd", EPS, STEP, 2, seed=4)
    assert adv.pgd(model, frames, labels, cfg, pfn).tobytes() == adv.pgd(model, frames, labels, cfg, pfn).tobytes()


@pytest.mark.parametrize("bad", [dict(kind="cw"), dict(epsilon=-1.0), dict(iters=0), dict(step=0.5), dict(step=0.0)])
def test_attack_config_validation(bad):
    with pytest.raises(adv.AttackConfigError):
        adv.AttackConfig(**bad)


def test_transfer_needs_distinct_models(model, batch):
    frames, labels = batch
    with pytest.raises(adv.AttackConfigError):
        adv.transfer_attack(model, model, frames, labels, adv.AttackConfig("transfer"), pfn)
    other = Branch(BranchConfig(kind="recurrent", channels=4, hidden=8), seed=1)
    res = adv.transfer_attack(other, model, frames, labels, adv.AttackConfig("transfer", EPS, STEP, 2), pfn)
    assert 0.0 <= res.clean_accuracy <= 1.0
    assert res.delta == res.adversarial_accuracy - res.clean_accuracy


def test_input_transform_is_bounded_and_seeded(batch):
    frames, _ = batch
    a = adv.input_transform(frames, np.random.default_rng(0))
    b = adv.input_transform(frames, np.random.default_rng(0))
    assert a.shape == frames.shape and a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


# -- certification -------------------------------------------------------------

def test_clopper_pearson_all_successes_closed_form():
    # with k successes out of k the one-sided bound is (1 - confidence)^(1/k)
    assert adv.clopper_pearson_lower(100, 100, 0.999) == pytest.approx(0.001 ** (1 / 100), rel=1e-12)
    assert adv.clopper_pearson_lower(0, 100, 0.999) == 0.0


def test_certify_abstains_on_a_split_vote():
    radius, abstain, p_a = adv.certify_counts(50, 100, adv.SmoothingConfig(0.25, 100, 0.999))
    assert abstain and radius == 0.0 and p_a <= 0.5


def test_certify_unanimous_radius():
    radius, abstain, _ = adv.certify_counts(100, 100, adv.SmoothingConfig(0.25, 100, 0.999))
    expected = 0.25 * norm.ppf(0.001 ** (1 / 100))
    assert not abstain
    assert radius == pytest.approx(expected, rel=1e-12)
    assert radius == pytest.approx(0.375, abs=0.01)


def test_radius_increases_with_votes():
    cfg = adv.SmoothingConfig(0.5, 200, 0.99)
    radii = [adv.certify_counts(v, 200, cfg)[0] for v in range(0, 201)]
    live = [r for r in radii if r > 0]
    assert live and all(b > a for a, b in zip(live, live[1:]))
    with pytest.raises(ValueError):
        adv.certify_counts(201, 200, cfg)


def test_smooth_certify_with_constant_classifier():
    cfg = adv.SmoothingConfig(0.25, 60, 0.999)
    cert = adv.smooth_certify(lambda x: np.full(len(x), 0.9), np.zeros((2, 3, 3, 3)), cfg, np.random.default_rng(0),
                              batch=7)
    assert cert.prediction == 1 and cert.votes == 60 and not cert.abstain
    assert cert.radius == pytest.approx(adv.certify_counts(60, 60, cfg)[0])
    cert = adv.smooth_certify(lambda x: np.full(len(x), 0.1), np.zeros((2, 3, 3, 3)), cfg, np.random.default_rng(0))
    assert cert.prediction == 0 and cert.votes == 60


@pytest.mark.parametrize("bad", [dict(sigma=0.0), dict(k=1), dict(confidence=1.0)])
def test_smoothing_config_validation(bad):
    with pytest.raises(ValueError):
        adv.SmoothingConfig(**bad)


def test_bce_per_clip_matches_closed_form():
    from phylaax.tensor import Tensor

    out = adv.bce_per_clip(Tensor(np.array([0.0, 2.0])), [1, 0]).data
    np.testing.assert_allclose(out, [math.log(2), math.log(1 + math.e ** 2)])
