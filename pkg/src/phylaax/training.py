"""AdamW with cosine warm restarts, and the per-epoch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import physics as phx
from . import tensor as tn
from .adversarial import AttackConfig, fgsm
from .losses import LossConfig, aux_mask_loss, focal_loss, total_loss
from .models import Branch

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t0: int = 5
    t_mult: int = 2
    lr_min: float = 0.0
    batch_size: int = 8
    adv_mix: float = 0.2
    adv_eps: float = 0.02
    crop: int = 0  # random temporal crop length during training; 0 keeps whole clips

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")
        if not 0.0 <= self.adv_mix <= 1.0:
            raise ValueError("adv_mix must lie in [0, 1]")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("t0 and t_mult must be >= 1")


def lr_at(epoch: float, base: float, t0: int = 5, t_mult: int = 2, lr_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts; ``epoch`` may be fractional.

    Periods are t0, t0*t_mult, t0*t_mult^2, ...; each restart returns to ``base``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    period, start = float(t0), 0.0
    while epoch >= start + period:
        start += period
        period *= t_mult
    frac = (epoch - start) / period
    return lr_min + (base - lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay, applied to matrices and kernels (ndim >= 2) only."""

    def __init__(self, params: dict[str, tn.Tensor], cfg: OptimConfig = OptimConfig()):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            if p.data.ndim >= 2 and c.weight_decay:
                p.data = p.data * (1.0 - lr * c.weight_decay)
            p.data = p.data - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


@dataclass
class ClipSet:
    """In-memory training or evaluation data."""

    frames: np.ndarray  # [N,T,H,W,3]
    physics: np.ndarray  # [N,T,C_p,H,W]
    masks: np.ndarray  # [N,T,1,H,W]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.frames) == len(self.physics) == len(self.masks) == n):
            raise ValueError("clip set arrays disagree on length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx)
        return ClipSet(self.frames[idx], self.physics[idx], self.masks[idx], self.labels[idx])


def physics_batch(fps: float = 8.0, bands: int = 4, rois=None) -> Callable[[np.ndarray], np.ndarray]:
    """Batch physics extractor ``[B,T,H,W,3] -> [B,T,C_p,H,W]``."""

    def fn(frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        return np.stack([phx.assemble(f, rois, fps, bands).stacked for f in frames])

    return fn


@dataclass
class EpochStats:
    epoch: int
    loss: float
    focal: float
    aux: float
    res: float
    lr: float
    steps: int
    adversarial: int
    alpha: float | None = None


@dataclass
class Trainer:
    branch: Branch
    cfg: OptimConfig = OptimConfig()
    loss_cfg: LossConfig = LossConfig()
    physics_fn: Callable[[np.ndarray], np.ndarray] | None = None
    seed: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.opt = AdamW(self.branch.params(), self.cfg)
        self.rng = np.random.default_rng(self.seed)
        self.epoch = 0
        if self.physics_fn is None:
            self.physics_fn = physics_batch(bands=self.branch.cfg.bands)

    def _adversarial(self, frames, physics, labels, k: int):
        """Replace the first ``k`` clips by FGSM versions crafted on the current model."""
        if k == 0:
            return frames, physics
        atk = AttackConfig("fgsm", epsilon=self.cfg.adv_eps, step=self.cfg.adv_eps)
        needs_p = self.branch.cfg.phylaax != "off"
        pfn = self.physics_fn if needs_p else (lambda f: None)
        adv = fgsm(self.branch, frames[:k], labels[:k], atk, pfn)
        frames = frames.copy()
        frames[:k] = adv
        if needs_p:
            physics = physics.copy()
            physics[:k] = pfn(adv)
        return frames, physics

    def step(self, batch: ClipSet, lr: float, n_adv: int = 0) -> dict[str, float]:
        frames, physics, masks = batch.frames, batch.physics, batch.masks
        frames, physics = self._adversarial(frames, physics, batch.labels, n_adv)
        crop = self.cfg.crop
        if crop and crop < frames.shape[1]:
            s = int(self.rng.integers(0, frames.shape[1] - crop + 1))
            frames, physics, masks = frames[:, s:s + crop], physics[:, s:s + crop], masks[:, s:s + crop]
        self.opt.zero_grad()
        out = self.branch.forward(frames, physics if self.branch.cfg.phylaax != "off" else None,
                                  mode="train", rng=self.rng)
        fl = focal_loss(out.logit, batch.labels, self.loss_cfg)
        aux = aux_mask_loss(out.m_art, masks)
        loss = total_loss(fl, aux, out.res_loss, self.loss_cfg)
        if not np.isfinite(loss.item()):
            raise DivergenceError(
                f"non-finite loss at epoch {self.epoch}: focal={fl.item()} aux={aux.item()} "
                f"res={None if out.res_loss is None else out.res_loss.item()}")
        loss.backward()
        self.opt.step(lr)
        return {"loss": loss.item(), "focal": fl.item(), "aux": aux.item(),
                "res": 0.0 if out.res_loss is None else out.res_loss.item()}

    def train_epoch(self, data: ClipSet) -> EpochStats:
        if len(data) == 0:
            raise ValueError("cannot train on an empty clip set")
        if self.epoch == 0 and self.branch.cfg.phylaax != "off":
            self.branch.fit_physics_norm(data.physics)
        order = self.rng.permutation(len(data))
        bs = self.cfg.batch_size
        n_steps = math.ceil(len(data) / bs)
        sums = {"loss": 0.0, "focal": 0.0, "aux": 0.0, "res": 0.0}
        n_adv_total = 0
        lr = self.cfg.lr
        for i in range(n_steps):
            idx = order[i * bs:(i + 1) * bs]
            lr = lr_at(self.epoch + i / n_steps, self.cfg.lr, self.cfg.t0, self.cfg.t_mult, self.cfg.lr_min)
            n_adv = int(round(self.cfg.adv_mix * len(idx)))
            parts = self.step(data.subset(idx), lr, n_adv)
            n_adv_total += n_adv
            for k in sums:
                sums[k] += parts[k] / n_steps
        alpha = self.branch.gate.alpha if self.branch.cfg.phylaax == "on" else None
        stats = EpochStats(self.epoch, sums["loss"], sums["focal"], sums["aux"], sums["res"], lr, n_steps,
                           n_adv_total, alpha)
        log.debug("epoch %d loss %.4f focal %.4f aux %.4f res %.4f lr %.2e alpha %s", stats.epoch, stats.loss,
                  stats.focal, stats.aux, stats.res, lr, alpha)
        self.history.append(stats)
        self.epoch += 1
        return stats

    def fit(self, data: ClipSet, epochs: int) -> list[EpochStats]:
        return [self.train_epoch(data) for _ in range(epochs)]
