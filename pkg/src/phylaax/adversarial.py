"""l-inf sign-gradient attacks, transfer evaluation and randomized-smoothing certification.

Every attack differentiates through the detector with the physics volume
recomputed from the current perturbed clip and then held constant for that
step. ``physics_fn`` maps a frame batch ``[B,T,H,W,3]`` to ``[B,T,C_p,H,W]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import norm

from . import tensor as tn
from .tensor import Tensor

PhysicsFn = Callable[[np.ndarray], np.ndarray]


class AttackConfigError(ValueError):
    pass


class Detector(Protocol):
    def logits(self, frames, physics) -> Tensor: ...


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.02
    step: float = 0.002
    iters: int = 10
    surrogate: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "transfer"):
            raise AttackConfigError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be >= 0")
        if self.iters < 1:
            raise AttackConfigError("iters must be >= 1")
        if self.step <= 0 or (self.epsilon > 0 and self.step > self.epsilon):
            raise AttackConfigError("step must satisfy 0 < step <= epsilon")


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    k: int = 100
    confidence: float = 0.999

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


def bce_per_clip(logit: Tensor, labels) -> Tensor:
    """``-log p_true`` per clip, via the stable log-sigmoid."""
    sign = 2.0 * np.asarray(labels, dtype=np.float64).reshape(-1) - 1.0
    return -tn.log_sigmoid(logit * sign)


def input_gradient(model: Detector, frames: np.ndarray, labels, physics_fn: PhysicsFn):
    """Per-clip attack loss at ``frames`` and its gradient with respect to the pixels."""
    physics = physics_fn(frames)
    x = Tensor(np.array(frames, dtype=np.float64), requires_grad=True)
    per = bce_per_clip(model.logits(x, physics), labels)
    tn.sum_(per).backward()
    return per.data.copy(), x.grad


def project(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Onto the intersection of the l-inf ball around ``x0`` and the [0, 1] box."""
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def fgsm(model: Detector, frames, labels, cfg: AttackConfig, physics_fn: PhysicsFn) -> np.ndarray:
    x0 = np.asarray(frames, dtype=np.float64)
    if cfg.epsilon == 0:
        return x0.copy()
    _, g = input_gradient(model, x0, labels, physics_fn)
    return project(x0 + cfg.epsilon * np.sign(g), x0, cfg.epsilon)


def pgd(model: Detector, frames, labels, cfg: AttackConfig, physics_fn: PhysicsFn,
        zero_init: bool = False, trace: list | None = None, iterates: list | None = None) -> np.ndarray:
    """Projected sign-gradient ascent from a seeded uniform start in the ball.

    ``trace`` (if given) receives the per-clip loss before each step and after
    the last one; ``iterates`` receives every projected iterate.
    """
    x0 = np.asarray(frames, dtype=np.float64)
    eps = cfg.epsilon
    if eps == 0:
        return x0.copy()
    if zero_init:
        x = x0.copy()
    else:
        rng = np.random.default_rng(cfg.seed)
        x = project(x0 + rng.uniform(-eps, eps, x0.shape), x0, eps)
    for _ in range(cfg.iters):
        loss, g = input_gradient(model, x, labels, physics_fn)
        if trace is not None:
            trace.append(loss)
        x = project(x + cfg.step * np.sign(g), x0, eps)
        if iterates is not None:
            iterates.append(x.copy())
    if trace is not None:
        with tn.no_grad():
            trace.append(bce_per_clip(model.logits(x, physics_fn(x)), labels).data.copy())
    return x


def predict_labels(model: Detector, frames, physics_fn: PhysicsFn) -> np.ndarray:
    with tn.no_grad():
        return (model.logits(frames, physics_fn(frames)).data > 0).astype(np.int64)


@dataclass
class TransferResult:
    clean_accuracy: float
    adversarial_accuracy: float

    @property
    def delta(self) -> float:
        return self.adversarial_accuracy - self.clean_accuracy


def transfer_attack(surrogate: Detector, target: Detector, frames, labels, cfg: AttackConfig,
                    physics_fn: PhysicsFn) -> TransferResult:
    """Craft PGD examples on ``surrogate`` and score them on ``target``."""
    if surrogate is target:
        raise AttackConfigError("surrogate and target must be distinct models")
    labels = np.asarray(labels).astype(np.int64)
    crafted = pgd(surrogate, frames, labels, AttackConfig("pgd", cfg.epsilon, cfg.step, cfg.iters, seed=cfg.seed),
                  physics_fn)
    clean = float(np.mean(predict_labels(target, frames, physics_fn) == labels))
    adv = float(np.mean(predict_labels(target, crafted, physics_fn) == labels))
    return TransferResult(clean, adv)


def input_transform(frames, rng: np.random.Generator, scale_jitter: float = 0.125, noise_std: float = 0.01):
    """Inference-time defense: random rescale, crop or pad back to size, plus uniform noise."""
    from scipy.ndimage import zoom

    x = np.asarray(frames, dtype=np.float64)
    h, w = x.shape[-3:-1]
    out = np.empty_like(x)
    lead = x.shape[:-3]
    flat = x.reshape(-1, h, w, 3)
    res = out.reshape(-1, h, w, 3)
    s = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
    for i, frame in enumerate(flat):
        z = zoom(frame, (s, s, 1), order=1)
        zh, zw = z.shape[:2]
        canvas = np.zeros((max(h, zh), max(w, zw), 3))
        oy, ox = (canvas.shape[0] - zh) // 2, (canvas.shape[1] - zw) // 2
        canvas[oy:oy + zh, ox:ox + zw] = z
        cy, cx = (canvas.shape[0] - h) // 2, (canvas.shape[1] - w) // 2
        res[i] = canvas[cy:cy + h, cx:cx + w]
    half = noise_std * np.sqrt(3.0)
    out = res.reshape(*lead, h, w, 3) + rng.uniform(-half, half, x.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class Certificate:
    prediction: int
    radius: float
    abstain: bool
    p_lower: float
    votes: int


def clopper_pearson_lower(successes: int, trials: int, confidence: float) -> float:
    """One-sided lower confidence bound on a binomial proportion."""
    if successes <= 0:
        return 0.0
    return float(beta_dist.ppf(1.0 - confidence, successes, trials - successes + 1))


def certify_counts(votes: int, k: int, cfg: SmoothingConfig) -> tuple[float, bool, float]:
    """Radius, abstain flag and lower bound from a top-class vote count."""
    if not 0 <= votes <= k:
        raise ValueError("votes must lie in [0, k]")
    p_a = clopper_pearson_lower(votes, k, cfg.confidence)
    if p_a <= 0.5:
        return 0.0, True, p_a
    return float(cfg.sigma * norm.ppf(p_a)), False, p_a


def smooth_certify(predict: Callable[[np.ndarray], np.ndarray], frames, cfg: SmoothingConfig,
                   rng: np.random.Generator, batch: int = 25) -> Certificate:
    """Majority vote of ``predict`` (frames batch -> fake probabilities) under
    Gaussian pixel noise, with a Clopper-Pearson certified l2 radius."""
    x = np.asarray(frames, dtype=np.float64)
    fake_votes = 0
    done = 0
    while done < cfg.k:
        n = min(batch, cfg.k - done)
        noisy = x[None] + rng.normal(0.0, cfg.sigma, (n, *x.shape))
        fake_votes += int(np.sum(predict(noisy) > 0.5))
        done += n
    pred = int(fake_votes * 2 > cfg.k)
    top = fake_votes if pred == 1 else cfg.k - fake_votes
    radius, abstain, p_a = certify_counts(top, cfg.k, cfg)
    return Certificate(pred, radius, abstain, p_a, top)
