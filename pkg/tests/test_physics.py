import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylaax import physics as phx

PULSE_HZ = 1.2


def rotation_field(omega, h=20, w=24, cx=11.3, cy=9.7):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([-omega * (yy - cy), omega * (xx - cx)], axis=-1)[None]


@pytest.mark.parametrize("omega", [0.013, 0.25, -0.7, 3.0])
def test_curl_of_rigid_rotation_is_four_omega_squared(omega):
    # central and one-sided differences are exact on a linear field
    c = phx.curl_squared(rotation_field(omega))
    assert np.max(np.abs(c - 4 * omega ** 2)) < 1e-9


def test_curl_of_translation_is_zero():
    flow = np.zeros((2, 8, 8, 2))
    flow[..., 0] = 0.4
    assert np.all(phx.curl_squared(flow) == 0)


def pulse_clip(fps, t, hw=32, amp=0.01):
    time = np.arange(t) / fps
    f = np.full((t, hw, hw, 3), 0.5)
    f[..., 1] += amp * np.sin(2 * np.pi * PULSE_HZ * time)[:, None, None]
    return f


@pytest.mark.parametrize("fps,t", [(8.0, 16), (30.0, 64), (30.0, 128)])
def test_rppg_recovers_planted_pulse_band(fps, t):
    bands = 4
    edges = np.linspace(*phx.RPPG_BAND, bands + 1)
    target = int(np.searchsorted(edges, PULSE_HZ, side="right") - 1)
    for vec in phx.rppg_bands(pulse_clip(fps, t), phx.RoiSpec(), fps, bands).values():
        assert int(np.argmax(vec)) == target == 0
        assert vec[target] >= 0.6
        assert vec.sum() == pytest.approx(1.0)


def test_rppg_flat_trace_is_uniform():
    vec = phx.band_powers(np.zeros(16), 8.0, 4)
    np.testing.assert_array_equal(vec, np.full(4, 0.25))


def test_rppg_volume_paints_rois_only():
    clip = pulse_clip(8.0, 16)
    vol = phx.rppg_volume(clip, phx.RoiSpec(), 8.0, 4)
    assert vol.shape == (16, 4, 32, 32)
    assert np.all(vol[:, :, 0, 0] == 0.25)
    r0, r1, c0, c1 = phx.RoiSpec().pixel_rect("forehead", 32, 32)
    assert vol[3, 0, r0, c0] > 0.6
    np.testing.assert_array_equal(vol[0], vol[-1])


@pytest.mark.parametrize("bad", [dict(t=8), dict(fps=0.0), dict(bands=1)])
def test_rppg_rejects_bad_inputs(bad):
    kw = dict(t=16, fps=8.0, bands=4) | bad
    with pytest.raises(phx.PhysicsInputError):
        phx.rppg_bands(np.full((kw["t"], 16, 16, 3), 0.5), phx.RoiSpec(), kw["fps"], kw["bands"])


def test_specular_map_of_symmetric_highlights_is_half():
    rng = np.random.default_rng(0)
    g = np.full((32, 32), 0.2)
    idx = rng.permutation(32 * 32)[:40]  # under 5% of pixels, two equally frequent levels
    g.flat[idx[:20]] = 0.8
    g.flat[idx[20:]] = 0.9
    frames = np.repeat(np.repeat(g[None, :, :, None], 3, -1), 2, 0)
    m = phx.specular_map(frames, percentile=95.0, window=32)
    assert np.max(np.abs(m - 0.5)) < 1e-9


def test_highlight_skewness_sign_follows_tail():
    lum = np.array([[1.0, 1.0, 1.0, 1.0, 5.0]])[None]
    mask = np.ones_like(lum, dtype=bool)
    skew, valid = phx.highlight_skewness(lum, mask)
    assert valid.all() and skew[0] > 0
    skew, _ = phx.highlight_skewness(-lum, mask)
    assert skew[0] < 0


def test_specular_map_is_inside_unit_interval():
    rng = np.random.default_rng(1)
    m = phx.specular_map(rng.random((3, 24, 20, 3)))
    assert m.shape == (3, 1, 24, 20)
    assert np.all((m > 0) & (m < 1))


def test_farneback_recovers_subpixel_translation():
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)

    def img(s):
        return 0.5 + 0.2 * np.sin(2 * np.pi * (xx - s) / 16) * np.cos(2 * np.pi * yy / 13)

    frames = np.repeat(np.stack([img(0.0), img(0.5)])[..., None], 3, -1)
    flow = phx.dense_flow(frames)[0, 8:24, 8:24]
    assert flow[..., 0].mean() == pytest.approx(0.5, abs=0.01)
    assert abs(flow[..., 1].mean()) < 0.01


def test_curl_map_is_projected_and_padded_to_t():
    rng = np.random.default_rng(2)
    m = phx.curl_map(rng.normal(size=(5, 6, 7, 2)))
    assert m.shape == (6, 1, 6, 7)
    assert m.min() == 0.0 and m.max() == 1.0
    np.testing.assert_array_equal(m[-1], m[-2])


def test_minmax_projection_of_constant_is_zero():
    assert np.all(phx.minmax_project(np.full((3, 3), 7.0)) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 40), st.integers(1, 40))
def test_resize_preserves_constants(h, w, oh, ow):
    out = phx.resize(np.full((2, h, w), 3.25), (oh, ow))
    assert out.shape == (2, oh, ow)
    np.testing.assert_allclose(out, 3.25, rtol=1e-12)


def test_srgb_to_lab_white_and_black():
    lab = phx.srgb_to_lab(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(lab[0], [100.0, 0.0, 0.0], atol=1e-3)
    np.testing.assert_allclose(lab[1], [0.0, 0.0, 0.0], atol=1e-9)


def test_assemble_stacks_all_conditioners():
    vol = phx.assemble(pulse_clip(8.0, 16, hw=24), fps=8.0, bands=4)
    assert vol.channels == 6
    assert vol.stacked.shape == (16, 6, 24, 24)
    assert np.isfinite(vol.stacked).all()


def test_frames_must_be_rgb_sequences():
    with pytest.raises(phx.PhysicsInputError):
        phx.assemble(np.zeros((16, 8, 8)))
    with pytest.raises(phx.PhysicsInputError):
        phx.RoiSpec({"bad": (0.5, 0.5, 0.4, 0.9)})
