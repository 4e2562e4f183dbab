"""Training objectives: focal classification loss, auxiliary mask BCE and the
resonance consistency loss, plus their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

NORM_GUARD = 1e-12
PROB_CLIP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    resonance_weight: float = 0.3
    aux_mask_weight: float = 0.5

    def __post_init__(self):
        if min(self.resonance_weight, self.aux_mask_weight) < 0:
            raise ValueError("loss weights must be non-negative")


def focal_loss(logit: Tensor, label, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of ``-a_t (1 - p_t)^gamma log p_t`` over the batch."""
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    if label.size == 0:
        raise ValueError("focal loss of an empty batch")
    logit = tn.reshape(logit, (-1,)) if logit.ndim != 1 else logit
    sign = 2.0 * label - 1.0
    s = logit * sign
    log_pt = tn.log_sigmoid(s)
    alpha_t = np.where(label > 0.5, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    per = log_pt * (-alpha_t)
    if cfg.focal_gamma != 0:
        per = per * tn.power(tn.sigmoid(-s), cfg.focal_gamma)
    return tn.mean(per)


def downsample_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average a binary mask ``[..., H, W]`` to ``size`` then re-binarise at 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2:]
    sh, sw = size
    if (h, w) == (sh, sw):
        return (mask >= 0.5).astype(np.float64)
    if h % sh or w % sw:
        raise ShapeError(f"mask {h}x{w} not an integer multiple of {sh}x{sw}")
    fh, fw = h // sh, w // sw
    pooled = mask.reshape(*mask.shape[:-2], sh, fh, sw, fw).mean(axis=(-3, -1))
    return (pooled >= 0.5).astype(np.float64)


def aux_mask_loss(m_art: Tensor, mask) -> Tensor:
    """Mean binary cross-entropy between the artifact map and a ground-truth mask."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[:-2] != m_art.shape[:-2]:
        raise ShapeError(f"mask {mask.shape} does not match map {m_art.shape}")
    mask = downsample_mask(mask, m_art.shape[-2:])
    p = tn.clip(m_art, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = tn.log(p) * mask + tn.log(1.0 - p) * (1.0 - mask)
    return -tn.mean(ll)


@lru_cache(maxsize=16)
def _diff_matrix(n: int) -> np.ndarray:
    """np.gradient as a matrix: central inside, one-sided at the ends."""
    d = np.zeros((n, n))
    if n == 1:
        return d
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5, 0.5
    return d


def spatial_gradient(x):
    """(d/dx, d/dy) of ``x[..., H, W]``; works on Tensors and arrays."""
    h, w = x.shape[-2:]
    dx, dy = _diff_matrix(w).T, _diff_matrix(h)
    if isinstance(x, Tensor):
        return tn.matmul(x, dx), tn.matmul(Tensor(dy), x)
    return x @ dx, dy @ x


def physics_average(physics: np.ndarray, channels=None) -> np.ndarray:
    """Per-clip, per-channel min-max normalised channel mean: ``[B,T,C,H,W] -> [B,T,1,H,W]``."""
    p = np.asarray(physics, dtype=np.float64)
    if channels is not None:
        p = p[:, :, list(channels)]
    lo = p.min(axis=(1, 3, 4), keepdims=True)
    hi = p.max(axis=(1, 3, 4), keepdims=True)
    span = hi - lo
    norm = np.where(span > NORM_GUARD, (p - lo) / np.where(span > NORM_GUARD, span, 1.0), 0.0)
    return norm.mean(axis=2, keepdims=True)


def resonance_loss(m_phy: Tensor, physics: np.ndarray, channels=None, p_avg: np.ndarray | None = None) -> Tensor:
    """One minus the cosine between spatial gradients of ``m_phy`` and the averaged
    physics map, per clip, averaged over the batch. Clips where either gradient
    has (near) zero norm contribute exactly 1."""
    if p_avg is None:
        p_avg = physics_average(physics, channels)
    if p_avg.shape != m_phy.shape:
        raise ShapeError(f"physics average {p_avg.shape} does not match map {m_phy.shape}")
    b = m_phy.shape[0]
    mx, my = spatial_gradient(m_phy)
    px, py = spatial_gradient(p_avg)
    axes = tuple(range(1, m_phy.ndim))
    dot = tn.sum_(mx * px, axis=axes) + tn.sum_(my * py, axis=axes)
    m_sq = tn.sum_(mx * mx, axis=axes) + tn.sum_(my * my, axis=axes)
    p_sq = (px * px).sum(axis=axes) + (py * py).sum(axis=axes)
    valid = (np.sqrt(m_sq.data) >= NORM_GUARD) & (np.sqrt(p_sq) >= NORM_GUARD)
    # one square root of the product, so parallel fields give sqrt(dot^2) == |dot| and a cosine of exactly +-1;
    # guarded clips get a harmless denominator and are masked out
    norm = tn.power(m_sq * np.where(valid, p_sq, 1.0) + np.where(valid, 0.0, 1.0), 0.5)
    cos = dot / norm * valid.astype(np.float64)
    per_clip = 1.0 - cos
    return tn.mean(per_clip)


def total_loss(focal, aux, res, cfg: LossConfig = LossConfig()):
    """``focal + aux_mask_weight * aux + resonance_weight * res``; ``None`` terms are skipped."""
    out = focal
    if aux is not None:
        out = out + aux * cfg.aux_mask_weight
    if res is not None:
        out = out + res * cfg.resonance_weight
    return out
