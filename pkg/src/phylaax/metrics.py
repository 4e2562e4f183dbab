"""Detection metrics and the uncertainty-aware ensemble fusion rule."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

TAU = 0.4
ECE_BINS = 15
UNDERFLOW = 1e-300


class UndefinedMetricError(ValueError):
    pass


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y


def _both_classes(y):
    if y.sum() == 0 or y.sum() == y.size:
        raise UndefinedMetricError("metric needs both classes present")


def auc_roc(scores, labels) -> float:
    """Mann-Whitney rank statistic with midranks for ties."""
    s, y = _binary(scores, labels)
    _both_classes(y)
    ranks = rankdata(s)  # average ranks
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, FNR) at every distinct threshold, from accept-nothing to accept-all."""
    s, y = _binary(scores, labels)
    _both_classes(y)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    n_pos, n_neg = y.sum(), y.size - y.sum()
    return fp / n_neg, 1.0 - tp / n_pos


def eer(scores, labels) -> float:
    """Equal error rate, linearly interpolated between sweep points."""
    fpr, fnr = roc_points(scores, labels)
    d = fnr - fpr  # decreasing from 1 to -1
    hit = np.nonzero(d <= 0)[0]
    i = int(hit[0])
    if d[i] == 0 or i == 0:
        return float(fpr[i])
    # crossing between i-1 (d > 0) and i (d <= 0)
    t = d[i - 1] / (d[i - 1] - d[i])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def f1(preds, labels) -> float:
    p, y = _binary(preds, labels)
    p = p.astype(np.int64)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def accuracy(preds, labels) -> float:
    p, y = _binary(preds, labels)
    return float(np.mean(p.astype(np.int64) == y))


def ece(probs, labels, bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width bins of ``max(p, 1-p)``."""
    p, y = _binary(probs, labels)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    conf = np.maximum(p, 1.0 - p)
    correct = ((p >= 0.5).astype(np.int64) == y).astype(np.float64)
    # conf lies in [0.5, 1]; bins still span [0, 1] so the bin edges stay conventional
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    # each bin contributes |sum(correct) - sum(conf)| / n; summing in exact rationals and rounding
    # once makes the result independent of summation order
    total = Fraction(0)
    for b in np.unique(idx):
        sel = idx == b
        total += abs(int(correct[sel].sum()) - sum(map(Fraction, conf[sel].tolist())))
    return float(total / len(p))


def detection_report(probs, labels) -> dict[str, float]:
    probs = np.asarray(probs, dtype=np.float64)
    preds = (probs >= 0.5).astype(np.int64)
    return {"auc": auc_roc(probs, labels), "accuracy": accuracy(preds, labels), "eer": eer(probs, labels),
            "f1": f1(preds, labels), "ece": ece(probs, labels)}


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def resonance_agreement(mean_res_loss: float) -> float:
    """Map a mean resonance loss in [0, 2] to an agreement score in [e^-2, 1]."""
    return float(np.exp(-mean_res_loss))


@dataclass
class FusionState:
    eta: np.ndarray  # [n_branch] validation AUC
    u: np.ndarray  # [n_branch] or [n_branch, B] normalised MC entropy
    r: np.ndarray  # [n_branch] resonance agreement
    z: np.ndarray  # [n_branch] or [n_branch, B] logits
    tau: float = TAU

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.eta.ndim != 1 or self.eta.size < 1:
            raise ValueError("need at least one branch")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def fusion_weights(state: FusionState, fixed: bool = False) -> np.ndarray:
    """Softmax-style weights over branches (axis 0); uniform when ``fixed`` or degenerate."""
    n = state.eta.size
    u = state.u if state.u.ndim > 1 else state.u[:, None]
    shape = (n, u.shape[1])
    if fixed:
        w = np.full(shape, 1.0 / n)
    else:
        # eta is an AUC in [0, 1], so exp(eta / tau) cannot overflow for sane tau
        scale = np.exp(state.eta / state.tau)
        num = (scale * state.r)[:, None] * (1.0 - u)
        tot = num.sum(axis=0, keepdims=True)
        degenerate = (num < UNDERFLOW).all(axis=0, keepdims=True)
        w = np.where(degenerate, 1.0 / n, num / np.where(degenerate, 1.0, tot))
    return w if state.u.ndim > 1 else w[:, 0]


def fuse(state: FusionState, fixed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Weights and fused probability ``sigmoid(sum_i w_i z_i)``."""
    w = fusion_weights(state, fixed)
    z = state.z if state.z.ndim == w.ndim else state.z.reshape(w.shape)
    logit = (w * z).sum(axis=0)
    return w, 1.0 / (1.0 + np.exp(-logit))
