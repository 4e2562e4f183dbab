"""Physics-conditioned localized artifact attention.

The artifact map ``m_art`` (a per-pixel manipulation probability) is used as
the query of a single-head cross-attention over physics tokens; keys and
values are linear projections of the physics volume. The attended value map
``m_cond`` is blended with ``m_art`` through a learned convex weight and
squashed, giving ``m_phy``, which multiplies the backbone features.

Attention runs independently within each frame over its ``H*W`` spatial
tokens. The physics volume is a constant input (no gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

ALPHA_INIT = 0.7
# manipulated regions cover a small fraction of pixels; starting the head at
# that prior keeps early mask-loss gradients from swamping everything else
HEAD_PRIOR = 0.05


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class PhysProjection:
    w_q: Tensor  # [d, 1]
    w_k: Tensor  # [d, C_p]
    w_v: Tensor  # [1, C_p]

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, c_p: int, d: int = 32, scale: float = 1.0) -> "PhysProjection":
        if d < 1:
            raise ValueError("projection width d must be >= 1")
        return cls(
            w_q=Tensor(rng.normal(0, scale, (d, 1)), requires_grad=True),
            w_k=Tensor(rng.normal(0, scale / math.sqrt(c_p), (d, c_p)), requires_grad=True),
            w_v=Tensor(rng.normal(0, scale, (1, c_p)), requires_grad=True),
        )

    def params(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


@dataclass
class AttentionBundle:
    m_art: Tensor
    m_cond: Tensor | None
    m_phy: Tensor
    alpha: float | None


def artifact_head(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel 1x1 projection plus sigmoid: ``[B,T,C,H,W] -> [B,T,1,H,W]``."""
    if features.ndim != 5:
        raise ShapeError(f"features must be [B,T,C,H,W], got {features.shape}")
    if weight.shape != (1, features.shape[2]):
        raise ShapeError(f"head weight {weight.shape} does not match {features.shape[2]} channels")
    b, t, c, h, w = features.shape
    flat = tn.transpose(features, (0, 1, 3, 4, 2))  # B,T,H,W,C
    z = tn.matmul(flat, tn.transpose(weight, (1, 0))) + bias  # B,T,H,W,1
    return tn.sigmoid(tn.transpose(z, (0, 1, 4, 2, 3)))


def _tokens(p: np.ndarray) -> np.ndarray:
    """[B,T,C,H,W] -> [B*T, H*W, C]."""
    b, t, c, h, w = p.shape
    return np.ascontiguousarray(p.transpose(0, 1, 3, 4, 2).reshape(b * t, h * w, c))


def cross_attention_gate(m_art: Tensor, physics: np.ndarray, proj: PhysProjection,
                         return_weights: bool = False):
    """Attend from artifact-map tokens to physics tokens within each frame.

    ``m_art``: [B,T,1,H,W]; ``physics``: [B,T,C_p,H,W] already at map
    resolution. Returns ``m_cond`` [B,T,1,H,W] (and the [B*T,N,N] weights).
    """
    physics = np.asarray(physics.data if isinstance(physics, Tensor) else physics, dtype=np.float64)
    if m_art.ndim != 5 or physics.ndim != 5:
        raise ShapeError("m_art and physics must both be 5-d")
    b, t, _, h, w = m_art.shape
    if physics.shape[:2] != (b, t) or physics.shape[3:] != (h, w):
        raise ShapeError(f"physics {physics.shape} does not align with m_art {m_art.shape}")
    n = h * w
    if n == 0:
        raise ValueError("cross-attention needs at least one spatial token")
    if physics.shape[2] != proj.w_k.shape[1]:
        raise ShapeError(f"physics has {physics.shape[2]} channels, projection expects {proj.w_k.shape[1]}")
    toks = Tensor(_tokens(physics))
    q = tn.matmul(tn.reshape(m_art, (b * t, n, 1)), tn.transpose(proj.w_q, (1, 0)))  # BT,N,d
    k = tn.matmul(toks, tn.transpose(proj.w_k, (1, 0)))  # BT,N,d
    v = tn.matmul(toks, tn.transpose(proj.w_v, (1, 0)))  # BT,N,1
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(proj.d))
    attn = tn.softmax(scores, axis=-1)
    m_cond = tn.reshape(tn.matmul(attn, v), (b, t, 1, h, w))
    return (m_cond, attn) if return_weights else m_cond


def blend(m_art: Tensor, m_cond: Tensor, alpha_raw: Tensor) -> Tensor:
    """``sigmoid(a * m_art + (1 - a) * m_cond)`` with ``a = sigmoid(alpha_raw)``."""
    if m_art.shape != m_cond.shape:
        raise ShapeError(f"blend shapes differ: {m_art.shape} vs {m_cond.shape}")
    a = tn.sigmoid(alpha_raw)
    return tn.sigmoid(a * m_art + (1.0 - a) * m_cond)


def apply_gate(features: Tensor, m_phy: Tensor) -> Tensor:
    """Scale every feature channel by the attention map."""
    fs, ms = features.shape, m_phy.shape
    if len(fs) != len(ms) or ms[-3] != 1 or fs[:-3] != ms[:-3] or fs[-2:] != ms[-2:]:
        raise ShapeError(f"cannot gate features {fs} with map {ms}")
    return features * m_phy


class PhyLAAX:
    """Artifact head, physics cross-attention and blend for one layer.

    ``mode="laa"`` is the unconditioned path (alpha pinned to 1, no outer
    squash): ``m_phy == m_art``.
    """

    def __init__(self, channels: int, c_p: int, rng: np.random.Generator, d: int = 32):
        self.head_w = Tensor(rng.normal(0, 1.0 / math.sqrt(channels), (1, channels)), requires_grad=True)
        self.head_b = Tensor(np.full(1, logit(HEAD_PRIOR)), requires_grad=True)
        self.proj = PhysProjection.init(rng, c_p, d)
        self.alpha_raw = Tensor(np.array(logit(ALPHA_INIT)), requires_grad=True)

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_raw.data)))

    def params(self) -> dict[str, Tensor]:
        out = {"head_w": self.head_w, "head_b": self.head_b, "alpha_raw": self.alpha_raw}
        out.update({f"proj.{k}": v for k, v in self.proj.params().items()})
        return out

    def __call__(self, features: Tensor, physics: np.ndarray | None, mode: str = "phylaax") -> AttentionBundle:
        m_art = artifact_head(features, self.head_w, self.head_b)
        if mode == "laa":
            return AttentionBundle(m_art, None, m_art, None)
        if physics is None:
            raise ValueError("physics volume required in phylaax mode")
        m_cond = cross_attention_gate(m_art, physics, self.proj)
        return AttentionBundle(m_art, m_cond, blend(m_art, m_cond, self.alpha_raw), self.alpha)
