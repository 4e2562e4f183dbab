"""Per-clip explanation artifacts: gate heatmap, gradient saliency, frame importance."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .models import Branch
from .physics import resize
from .tensor import Tensor


@dataclass
class Explanation:
    m_phy: np.ndarray  # [H, W] time-averaged gate, upsampled to the clip
    saliency: np.ndarray  # [H, W] |d logit / d pixel| (channel-summed, time-averaged) times the gate
    frame_importance: np.ndarray  # [T], sums to 1


def explain_clip(branch: Branch, frames, physics=None) -> Explanation:
    """Gradient-times-gate saliency for one clip ``[T,H,W,3]``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"clip must be [T,H,W,3], got {frames.shape}")
    t, h, w, _ = frames.shape
    p = None if physics is None else np.asarray(physics, dtype=np.float64)[None]
    x = Tensor(frames[None].copy(), requires_grad=True)
    out = branch.forward(x, p, mode="eval", with_resonance=False)
    tn.sum_(out.logit).backward()
    gate = resize(out.m_phy.data[0], (h, w))[:, 0]  # [T, H, W]
    grad = np.abs(x.grad[0]).sum(axis=-1)  # [T, H, W]
    att = out.frame_attention.data[0]
    return Explanation(gate.mean(axis=0), (grad * gate).mean(axis=0), att / att.sum())


def to_gray8(img: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale image."""
    g = to_gray8(img)
    if g.ndim != 2:
        raise ValueError("PGM needs a 2-d image")
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def mask_mass_fraction(saliency: np.ndarray, mask: np.ndarray) -> float:
    """Share of the saliency mass that falls inside a binary mask."""
    s = np.asarray(saliency, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        raise ValueError("saliency has no mass")
    return float(s[np.asarray(mask) > 0.5].sum() / total)
