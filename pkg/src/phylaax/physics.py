"""Physics conditioners computed from raw frames.

Three per-frame maps are produced and stacked into a :class:`PhysicsVolume`:

* ``p_flow``: squared curl of a Farnebäck dense flow field, min-max projected
  per clip;
* ``p_spec``: logistic-squashed skewness of CIELAB lightness over highlight
  pixels in sliding windows;
* ``p_rppg``: per-ROI band powers of the detrended green-channel trace,
  painted over each ROI rectangle.

Everything here is plain numpy and runs outside the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit

RPPG_BAND = (0.75, 4.0)
PROJECTION_EPS = 1e-12
BAND_POWER_EPS = 1e-12


class PhysicsInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ROIs and volume container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiSpec:
    """Named rectangles ``(x0, y0, x1, y1)`` in normalised [0, 1] coordinates."""

    rects: dict = field(default_factory=lambda: dict(DEFAULT_ROIS))

    def __post_init__(self):
        for name, (x0, y0, x1, y1) in self.rects.items():
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise PhysicsInputError(f"ROI {name!r} must lie inside the frame with nonzero area")

    def pixel_rect(self, name: str, h: int, w: int) -> tuple[int, int, int, int]:
        """Row/column slice bounds ``(r0, r1, c0, c1)``, at least one pixel each way."""
        x0, y0, x1, y1 = self.rects[name]
        r0, c0 = int(np.floor(y0 * h)), int(np.floor(x0 * w))
        r1 = max(int(np.ceil(y1 * h)), r0 + 1)
        c1 = max(int(np.ceil(x1 * w)), c0 + 1)
        return r0, min(r1, h), c0, min(c1, w)


DEFAULT_ROIS = {
    "forehead": (0.30, 0.16, 0.70, 0.36),
    "left-cheek": (0.18, 0.48, 0.44, 0.72),
    "right-cheek": (0.56, 0.48, 0.82, 0.72),
}


@dataclass
class PhysicsVolume:
    p_flow: np.ndarray  # [T, 1, H, W]
    p_spec: np.ndarray  # [T, 1, H, W]
    p_rppg: np.ndarray  # [T, C_r, H, W]

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.p_flow, self.p_spec, self.p_rppg], axis=1)

    @property
    def channels(self) -> int:
        return 2 + self.p_rppg.shape[1]


# ---------------------------------------------------------------------------
# resampling helpers
# ---------------------------------------------------------------------------

def _interp_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Linear interpolation weights from samples at ``src`` to positions ``dst`` (clamped)."""
    m = np.zeros((dst.size, src.size))
    pos = np.interp(dst, src, np.arange(src.size, dtype=np.float64))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src.size - 1)
    frac = pos - lo
    rows = np.arange(dst.size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear resampling matrix; the triangle kernel widens when shrinking (antialiased)."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    j = np.arange(n_in)
    wts = np.clip(1.0 - np.abs(j[None, :] - centers[:, None]) / support, 0.0, None)
    return wts / wts.sum(axis=1, keepdims=True)


def resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize the two trailing axes of ``arr`` to ``size``."""
    h, w = arr.shape[-2:]
    if (h, w) == tuple(size):
        return np.array(arr, dtype=np.float64)
    mr = _resize_matrix(h, size[0])
    mc = _resize_matrix(w, size[1])
    return np.matmul(np.matmul(mr, arr), mc.T)


def minmax_project(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < PROJECTION_EPS:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def _check_frames(frames: np.ndarray, min_t: int = 1) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise PhysicsInputError(f"frames must be [T, H, W, 3], got {frames.shape}")
    if frames.shape[0] < min_t:
        raise PhysicsInputError(f"need at least {min_t} frames, got {frames.shape[0]}")
    return frames


def grayscale(frames: np.ndarray) -> np.ndarray:
    return frames @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# Farnebäck dense flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FarnebackParams:
    poly_n: int = 5
    poly_sigma: float = 1.1
    window: int = 9
    iterations: int = 3
    reg: float = 1e-10


@lru_cache(maxsize=8)
def _poly_kernels(n: int, sigma: float) -> np.ndarray:
    """Filters mapping a neighbourhood to weighted LSQ coefficients of
    ``1, x, y, x^2, y^2, xy`` (x = column offset, y = row offset)."""
    r = n // 2
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    x, y = xs.ravel(), ys.ravel()
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    basis = np.stack([np.ones_like(x), x, y, x * x, y * y, x * y], axis=1)
    bw = basis.T * g
    kern = np.linalg.solve(bw @ basis, bw)
    return kern.reshape(6, n, n)


def poly_expansion(img: np.ndarray, n: int = 5, sigma: float = 1.1) -> np.ndarray:
    """Per-pixel quadratic fit coefficients for a stack ``img[T, H, W]`` -> ``[6, T, H, W]``."""
    kern = _poly_kernels(n, sigma)
    return np.stack([ndimage.correlate(img, k[None], mode="reflect") for k in kern])


def _window_blur(x: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    sigma = r / 2.0
    return ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), truncate=r / sigma, mode="reflect")


def flow_pairs(first: np.ndarray, second: np.ndarray, params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Flow from each grayscale ``first[k]`` to ``second[k]``; returns ``[K, H, W, 2]`` as (vx, vy)."""
    k, h, w = first.shape
    c1 = poly_expansion(first, params.poly_n, params.poly_sigma)
    c2 = poly_expansion(second, params.poly_n, params.poly_sigma)
    b1x, b1y = c1[1], c1[2]
    a1xx, a1yy, a1xy = c1[3], c1[4], c1[5] / 2.0
    tt, yy, xx = np.meshgrid(np.arange(k), np.arange(h), np.arange(w), indexing="ij")
    dx = np.zeros((k, h, w))
    dy = np.zeros((k, h, w))
    for _ in range(params.iterations):
        coords = np.stack([tt, np.clip(yy + dy, 0, h - 1), np.clip(xx + dx, 0, w - 1)])
        warped = [ndimage.map_coordinates(c2[i], coords, order=1, mode="nearest") for i in range(1, 6)]
        b2x, b2y, a2xx, a2yy, a2xy = warped
        axx = 0.5 * (a1xx + a2xx)
        ayy = 0.5 * (a1yy + a2yy)
        axy = 0.5 * (a1xy + 0.5 * a2xy)
        hx = -0.5 * (b2x - b1x) + axx * dx + axy * dy
        hy = -0.5 * (b2y - b1y) + axy * dx + ayy * dy
        # normal equations of A d = h, averaged over the window
        g11 = _window_blur(axx * axx + axy * axy, params.window)
        g12 = _window_blur(axy * (axx + ayy), params.window)
        g22 = _window_blur(axy * axy + ayy * ayy, params.window)
        r1 = _window_blur(axx * hx + axy * hy, params.window)
        r2 = _window_blur(axy * hx + ayy * hy, params.window)
        g11 = g11 + params.reg
        g22 = g22 + params.reg
        det = g11 * g22 - g12 * g12
        dx = (g22 * r1 - g12 * r2) / det
        dy = (g11 * r2 - g12 * r1) / det
    return np.stack([dx, dy], axis=-1)


def dense_flow(frames: np.ndarray, params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Farnebäck flow between consecutive frames: ``[T, H, W, 3]`` -> ``[T-1, H, W, 2]``."""
    frames = _check_frames(frames, min_t=2)
    gray = grayscale(frames)
    return flow_pairs(gray[:-1], gray[1:], params)


# ---------------------------------------------------------------------------
# curl
# ---------------------------------------------------------------------------

def curl_squared(flow: np.ndarray) -> np.ndarray:
    """(dvy/dx - dvx/dy)^2 per pixel, central differences inside, one-sided at borders."""
    vx, vy = flow[..., 0], flow[..., 1]
    return (np.gradient(vy, axis=-1) - np.gradient(vx, axis=-2)) ** 2


def curl_map(flow: np.ndarray) -> np.ndarray:
    """Projected curl map ``[T, 1, H, W]`` from a ``[T-1, H, W, 2]`` flow field."""
    c = minmax_project(curl_squared(flow))
    c = np.concatenate([c, c[-1:]], axis=0)
    return c[:, None]


# ---------------------------------------------------------------------------
# specular skewness
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65 = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] to CIELAB under D65; last axis is the colour axis."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lum = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([lum, a, b], axis=-1)


def _window_starts(n: int, window: int, stride: int) -> list[int]:
    window = min(window, n)
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def highlight_skewness(lum: np.ndarray, mask: np.ndarray, min_count: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Sample skewness of ``lum`` over ``mask`` along the last two axes.

    Returns (skewness, valid); entries with fewer than ``min_count`` masked
    samples are invalid and carry skewness 0.
    """
    m = mask.astype(np.float64)
    n = m.sum(axis=(-2, -1))
    safe = np.maximum(n, 1.0)
    mu = (lum * m).sum(axis=(-2, -1)) / safe
    dev = (lum - mu[..., None, None]) * m
    m2 = (dev ** 2).sum(axis=(-2, -1)) / safe
    m3 = (dev ** 3).sum(axis=(-2, -1)) / safe
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(m2 > 1e-20, m3 / np.maximum(m2, 1e-300) ** 1.5, 0.0)
    valid = n >= min_count
    return np.where(valid, skew, 0.0), valid


def specular_map(frames: np.ndarray, percentile: float = 95.0, window: int = 8, stride: int = 4) -> np.ndarray:
    """Highlight-skewness map ``[T, 1, H, W]`` with values strictly inside (0, 1)."""
    frames = _check_frames(frames)
    t, h, w, _ = frames.shape
    lum = srgb_to_lab(frames)[..., 0]
    thr = np.percentile(lum.reshape(t, -1), percentile, axis=1)
    hl = lum > thr[:, None, None]
    rows = _window_starts(h, window, stride)
    cols = _window_starts(w, window, stride)
    wh, ww = min(window, h), min(window, w)
    lw = sliding_window_view(lum, (wh, ww), axis=(1, 2))[:, rows][:, :, cols]
    mw = sliding_window_view(hl, (wh, ww), axis=(1, 2))[:, rows][:, :, cols]
    skew, valid = highlight_skewness(lw, mw)
    grid = np.where(valid, expit(skew), 0.5)
    mr = _interp_matrix(np.asarray(rows) + (wh - 1) / 2.0, np.arange(h, dtype=np.float64))
    mc = _interp_matrix(np.asarray(cols) + (ww - 1) / 2.0, np.arange(w, dtype=np.float64))
    out = np.einsum("ih,thw,jw->tij", mr, grid, mc)
    return out[:, None]


# ---------------------------------------------------------------------------
# rPPG band powers
# ---------------------------------------------------------------------------

def detrend(trace: np.ndarray, fps: float) -> np.ndarray:
    """Subtract a one-second moving average."""
    win = max(1, int(round(fps)))
    return trace - ndimage.uniform_filter1d(trace, win, mode="nearest")


def band_powers(trace: np.ndarray, fps: float, bands: int = 4, band=RPPG_BAND) -> np.ndarray:
    """Normalised power of a detrended trace in ``bands`` equal sub-bands of ``band``."""
    n = 1 << max(int(np.ceil(np.log2(len(trace)))), 0)
    spec = np.abs(np.fft.rfft(trace, n=n)) ** 2
    freqs = np.fft.rfftfreq(n, d=1.0 / fps)
    edges = np.linspace(band[0], band[1], bands + 1)
    inband = (freqs >= band[0]) & (freqs <= band[1])
    idx = np.clip(np.searchsorted(edges, freqs, side="right") - 1, 0, bands - 1)
    power = np.bincount(idx[inband], weights=spec[inband], minlength=bands)
    total = power.sum()
    if total < BAND_POWER_EPS:
        return np.full(bands, 1.0 / bands)
    return power / total


def roi_traces(frames: np.ndarray, rois: RoiSpec) -> dict[str, np.ndarray]:
    t, h, w, _ = frames.shape
    out = {}
    for name in rois.rects:
        r0, r1, c0, c1 = rois.pixel_rect(name, h, w)
        out[name] = frames[:, r0:r1, c0:c1, 1].mean(axis=(1, 2))
    return out


def rppg_bands(frames: np.ndarray, rois: RoiSpec, fps: float, bands: int = 4) -> dict[str, np.ndarray]:
    frames = _check_frames(frames)
    if frames.shape[0] < 16:
        raise PhysicsInputError(f"rPPG needs T >= 16, got {frames.shape[0]}")
    if fps <= 0:
        raise PhysicsInputError(f"fps must be positive, got {fps}")
    if not 2 <= bands <= 16:
        raise PhysicsInputError(f"bands must be in [2, 16], got {bands}")
    return {name: band_powers(detrend(tr, fps), fps, bands)
            for name, tr in roi_traces(frames, rois).items()}


def rppg_volume(frames: np.ndarray, rois: RoiSpec, fps: float, bands: int = 4) -> np.ndarray:
    """Band-power volume ``[T, C_r, H, W]``; 1/C_r outside every ROI."""
    powers = rppg_bands(frames, rois, fps, bands)
    t, h, w, _ = frames.shape
    vol = np.full((bands, h, w), 1.0 / bands)
    for name, vec in powers.items():
        r0, r1, c0, c1 = rois.pixel_rect(name, h, w)
        vol[:, r0:r1, c0:c1] = vec[:, None, None]
    return np.broadcast_to(vol, (t, bands, h, w)).copy()


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble(frames: np.ndarray, rois: RoiSpec | None = None, fps: float = 8.0, bands: int = 4,
             percentile: float = 95.0) -> PhysicsVolume:
    frames = _check_frames(frames, min_t=2)
    rois = rois or RoiSpec()
    return PhysicsVolume(
        p_flow=curl_map(dense_flow(frames)),
        p_spec=specular_map(frames, percentile),
        p_rppg=rppg_volume(frames, rois, fps, bands),
    )
