import numpy as np
import pytest

from conftest import tiny_clips
from phylaax.explain import explain_clip, mask_mass_fraction, read_pgm, to_gray8, write_pgm
from phylaax.models import Branch, BranchConfig
from phylaax.training import OptimConfig, Trainer, physics_batch


def test_gray8_scaling_and_constant_images():
    np.testing.assert_array_equal(to_gray8(np.array([[0.0, 0.5, 1.0]])), [[0, 128, 255]])
    np.testing.assert_array_equal(to_gray8(np.full((2, 2), 3.0)), np.zeros((2, 2)))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7))
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), to_gray8(img))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))


def test_mask_mass_fraction():
    s = np.array([[1.0, 3.0], [0.0, 4.0]])
    assert mask_mass_fraction(s, np.array([[0, 1], [0, 1]])) == 7 / 8
    with pytest.raises(ValueError):
        mask_mass_fraction(np.zeros((2, 2)), np.ones((2, 2)))


def test_explanation_shapes(clips8):
    b = Branch(BranchConfig(channels=4, hidden=8), seed=0)
    ex = explain_clip(b, clips8.frames[1], clips8.physics[1])
    assert ex.m_phy.shape == ex.saliency.shape == clips8.frames.shape[2:4]
    assert ex.frame_importance.shape == (clips8.frames.shape[1],)
    assert ex.frame_importance.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(ex.saliency >= 0)
    with pytest.raises(ValueError):
        explain_clip(b, clips8.frames[1, ..., :2], clips8.physics[1])


def test_trained_saliency_concentrates_on_the_manipulated_region():
    # localization oracle: a detector that uses the planted region puts more saliency there than its area share
    train, test = tiny_clips(48, seed=11), tiny_clips(12, seed=12)
    b = Branch(BranchConfig(kind="recurrent", channels=8, hidden=16), seed=0)
    Trainer(b, OptimConfig(lr=2e-2, batch_size=16, adv_mix=0.0, crop=8), physics_fn=physics_batch(8.0, 4),
            seed=0).fit(train, 6)
    for i in np.flatnonzero(test.labels == 1):
        mask = test.masks[i, :, 0].mean(axis=0) > 0.5
        ex = explain_clip(b, test.frames[i], test.physics[i])
        assert mask_mass_fraction(ex.saliency, mask) >= mask.mean()
