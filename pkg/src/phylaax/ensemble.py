"""Three-branch ensemble with uncertainty- and resonance-aware fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .losses import physics_average, resonance_loss
from .metrics import FusionState, auc_roc, fusion_weights, resonance_agreement
from .models import Branch, mc_dropout_predict
from .tensor import Tensor

MC_SAMPLES = 32


def branch_needs_physics(branch: Branch) -> bool:
    return branch.cfg.phylaax != "off"


def branch_logits(branch: Branch, frames, physics, batch: int = 32) -> np.ndarray:
    """Eval-mode logits in chunks, without building a graph."""
    frames = np.asarray(frames, dtype=np.float64)
    out = []
    with tn.no_grad():
        for s in range(0, len(frames), batch):
            p = physics[s:s + batch] if branch_needs_physics(branch) else None
            out.append(branch.logits(frames[s:s + batch], p).data)
    return np.concatenate(out)


def mean_resonance(branch: Branch, frames, physics, batch: int = 32) -> float:
    """Mean per-clip resonance loss of the branch's conditioned map; 0 for branches without a physics gate."""
    if branch.cfg.phylaax != "on":
        return 0.0
    vals = []
    with tn.no_grad():
        for s in range(0, len(frames), batch):
            enc = branch.encode(frames[s:s + batch], physics[s:s + batch])
            p_avg = physics_average(enc.physics, branch.cfg.kept_channels())
            vals.append(resonance_loss(enc.bundle.m_phy, enc.physics, p_avg=p_avg).item() * len(p_avg))
    return float(np.sum(vals) / len(frames))


@dataclass
class Ensemble:
    branches: list
    eta: np.ndarray = None
    r: np.ndarray = None
    fixed: bool = False
    mc_samples: int = MC_SAMPLES
    seed: int = 0
    names: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.branches)
        if n < 1:
            raise ValueError("ensemble needs at least one branch")
        self.eta = np.full(n, 0.5) if self.eta is None else np.asarray(self.eta, dtype=np.float64)
        self.r = np.ones(n) if self.r is None else np.asarray(self.r, dtype=np.float64)
        if not self.names:
            self.names = [b.cfg.kind for b in self.branches]

    def calibrate(self, frames, physics, labels) -> None:
        """Refresh validation AUC and resonance agreement for every branch."""
        self.eta = np.array([auc_roc(branch_logits(b, frames, physics), labels) for b in self.branches])
        self.r = np.array([resonance_agreement(mean_resonance(b, frames, physics)) for b in self.branches])

    def uncertainty(self, frames, physics, clip_ids=None) -> tuple[np.ndarray, np.ndarray]:
        """MC-dropout mean probabilities and normalised entropies, each ``[n_branch, B]``.

        ``clip_ids`` key each clip's dropout stream; pass dataset positions when
        scoring in chunks so a clip's result does not depend on the chunking.
        """
        probs, ents = [], []
        for i, b in enumerate(self.branches):
            p = physics if branch_needs_physics(b) else None
            mean, ent = mc_dropout_predict(b, frames, p, k=self.mc_samples, seed=self.seed + i, clip_ids=clip_ids)
            probs.append(mean)
            ents.append(ent)
        return np.stack(probs), np.stack(ents)

    def state(self, frames, physics, clip_ids=None) -> FusionState:
        _, u = self.uncertainty(frames, physics, clip_ids)
        z = np.stack([branch_logits(b, frames, physics) for b in self.branches])
        return FusionState(self.eta, u, self.r, z)

    def weights(self, frames, physics, clip_ids=None) -> np.ndarray:
        if self.fixed:
            n = len(self.branches)
            return np.full((n, len(frames)), 1.0 / n)
        with tn.no_grad():
            _, u = self.uncertainty(np.asarray(frames.data if isinstance(frames, Tensor) else frames), physics,
                                    clip_ids)
        return fusion_weights(FusionState(self.eta, u, self.r, np.zeros_like(u)))

    def logits(self, frames, physics, clip_ids=None) -> Tensor:
        """Fused logit, differentiable through the branches; the fusion weights
        are evaluated at the current input and held constant."""
        w = self.weights(frames, physics, clip_ids)
        total = None
        for i, b in enumerate(self.branches):
            z = b.logits(frames, physics if branch_needs_physics(b) else None) * w[i]
            total = z if total is None else total + z
        return total

    def predict_proba(self, frames, physics, batch: int = 32) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        out = []
        for s in range(0, len(frames), batch):
            f, p = frames[s:s + batch], physics[s:s + batch]
            w = self.weights(f, p, np.arange(s, s + len(f)))
            z = np.stack([branch_logits(b, f, p) for b in self.branches])
            out.append(1.0 / (1.0 + np.exp(-(w * z).sum(axis=0))))
        return np.concatenate(out)
