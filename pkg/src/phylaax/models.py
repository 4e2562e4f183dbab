"""Toy spatiotemporal branches, each with one physics-conditioned attention stage.

Pipeline per branch::

    frames -> conv/relu/pool x2 stem -> artifact head + physics gate
           -> spatial mean pool -> temporal encoder -> attention pool -> logit

Temporal encoders: a bidirectional tanh recurrent unit, a 2-layer pre-norm
self-attention encoder with sinusoidal positions, or a 3-layer causal dilated
convolution stack. Dropout sits after the stem only, so MC-dropout reuses one
stem pass for all samples.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import phyt
from . import tensor as tn
from .attention import AttentionBundle, PhyLAAX, apply_gate
from .losses import physics_average, resonance_loss
from .physics import resize
from .tensor import Tensor

KINDS = ("recurrent", "transformer", "causal-conv")
PHYLAAX_MODES = ("on", "off", "concat")
CONDITIONERS = ("flow", "spec", "rppg")
PIXEL_MEAN, PIXEL_SCALE = 0.5, 0.25
# gated, pooled features can be tiny (the gate starts near its prior), so a
# conventional 1e-5 epsilon would swamp their spread
POOL_NORM_EPS = 1e-12
POOL_NORM_MOMENTUM = 0.1


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class BranchConfig:
    kind: str = "recurrent"
    channels: int = 16
    hidden: int = 16
    dropout: float = 0.2
    phylaax: str = "on"
    drop: tuple = ()
    bands: int = 4
    d: int = 32
    kernel: int = 7
    dilations: tuple = (1, 2, 4)
    min_t: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.phylaax not in PHYLAAX_MODES:
            raise ValueError(f"phylaax must be one of {PHYLAAX_MODES}")
        if self.channels < 4:
            raise ValueError("channels must be >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        bad = set(self.drop) - set(CONDITIONERS)
        if bad:
            raise ValueError(f"unknown conditioners {sorted(bad)}")

    @property
    def c_p(self) -> int:
        return 2 + self.bands

    def kept_channels(self) -> list[int]:
        groups = {"flow": [0], "spec": [1], "rppg": list(range(2, 2 + self.bands))}
        return [c for name in CONDITIONERS if name not in self.drop for c in groups[name]]

    def to_meta(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "BranchConfig":
        kw = {}
        for f in cls.__dataclass_fields__.values():
            if f.name not in meta:
                continue
            raw = meta[f.name]
            if f.name in ("drop",):
                kw[f.name] = tuple(x for x in raw.split(",") if x)
            elif f.name == "dilations":
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif f.name == "dropout":
                kw[f.name] = float(raw)
            elif f.name in ("kind", "phylaax"):
                kw[f.name] = raw
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class BranchOutput:
    logit: Tensor  # [B]
    m_phy: Tensor
    m_art: Tensor
    res_loss: Tensor | None
    frame_attention: Tensor  # [B, T]
    frame_states: Tensor  # [B, T, F]
    alpha: float | None = None


@dataclass
class Encoded:
    """Stem output shared by every stochastic temporal pass."""

    z: Tensor  # [B, T, F]
    bundle: AttentionBundle
    physics: np.ndarray | None  # [B, T, C_p, h, w] at map resolution


def _param(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def sinusoidal_positions(t: int, dim: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Branch:
    def __init__(self, cfg: BranchConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, hdim = cfg.channels, cfg.hidden
        in_ch = 3 + (cfg.c_p if cfg.phylaax == "concat" else 0)
        p = {}
        p["stem.w1"] = _param(rng, (c, in_ch, 3, 3), in_ch * 9)
        p["stem.b1"] = _zeros(c)
        p["stem.w2"] = _param(rng, (c, c, 3, 3), c * 9)
        p["stem.b2"] = _zeros(c)
        self.gate = PhyLAAX(c, cfg.c_p, rng, cfg.d)
        # +1: pooled gate occupancy, i.e. a constant feature channel passed through the gate;
        # +1 more with the physics gate: the pooled conditioned map itself
        f = self.pooled_dim
        p["in.w"] = _param(rng, (f, hdim), f)
        p["norm.g"] = Tensor(np.ones(f), requires_grad=True)
        p["norm.b"] = _zeros(f)
        self.buffers = {"norm.mean": np.zeros(f), "norm.var": np.ones(f),
                        "phys.mean": np.zeros(cfg.c_p), "phys.std": np.ones(cfg.c_p)}
        p["in.b"] = _zeros(hdim)
        if cfg.kind == "recurrent":
            for d in ("fw", "bw"):
                p[f"rnn.{d}.wx"] = Tensor(rng.normal(0, 1 / math.sqrt(hdim), (hdim, hdim)), requires_grad=True)
                p[f"rnn.{d}.wh"] = Tensor(np.linalg.qr(rng.normal(size=(hdim, hdim)))[0] * 0.9, requires_grad=True)
                p[f"rnn.{d}.b"] = _zeros(hdim)
            out_dim = 2 * hdim
        elif cfg.kind == "transformer":
            for layer in range(2):
                for name in ("q", "k", "v", "o"):
                    p[f"tf{layer}.{name}"] = Tensor(rng.normal(0, 1 / math.sqrt(hdim), (hdim, hdim)), requires_grad=True)
                p[f"tf{layer}.w1"] = _param(rng, (hdim, 2 * hdim), hdim)
                p[f"tf{layer}.b1"] = _zeros(2 * hdim)
                p[f"tf{layer}.w2"] = Tensor(rng.normal(0, 1 / math.sqrt(2 * hdim), (2 * hdim, hdim)), requires_grad=True)
                p[f"tf{layer}.b2"] = _zeros(hdim)
                for ln in ("ln1", "ln2"):
                    p[f"tf{layer}.{ln}.g"] = Tensor(np.ones(hdim), requires_grad=True)
                    p[f"tf{layer}.{ln}.b"] = _zeros(hdim)
            out_dim = hdim
        else:
            for i, _ in enumerate(cfg.dilations):
                p[f"tcn{i}.w"] = Tensor(rng.normal(0, 1 / math.sqrt(hdim * cfg.kernel), (hdim, hdim, cfg.kernel)),
                                        requires_grad=True)
                p[f"tcn{i}.b"] = _zeros(hdim)
            out_dim = hdim
        p["pool.a"] = Tensor(rng.normal(0, 1 / math.sqrt(out_dim), (out_dim, 1)), requires_grad=True)
        p["out.w"] = Tensor(rng.normal(0, 1 / math.sqrt(out_dim), (out_dim, 1)), requires_grad=True)
        p["out.b"] = _zeros(1)
        self.p = p

    @property
    def pooled_dim(self) -> int:
        return self.cfg.channels + (2 if self.cfg.phylaax == "on" else 1)

    # -- parameters --------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out = dict(self.p)
        out.update({f"gate.{k}": v for k, v in self.gate.params().items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params().items()}
        out.update({f"buffer.{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = (set(params) | {f"buffer.{k}" for k in self.buffers}) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, v in params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer.{k}"], dtype=np.float64)

    def save(self, path, extra_meta: dict[str, str] | None = None) -> None:
        meta = self.cfg.to_meta()
        meta.update(extra_meta or {})
        phyt.save_archive(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Branch":
        state, meta = phyt.load_archive(path)
        model = cls(BranchConfig.from_meta(meta))
        model.load_state_dict(state)
        model.meta = meta
        return model

    # -- forward pieces -------------------------------------------------------
    def fit_physics_norm(self, physics: np.ndarray) -> None:
        """Per-channel statistics of a training physics volume ``[N,T,C_p,H,W]``.

        Clip-to-clip differences in P are a few hundredths, far below the
        spread of the artifact logits they are blended with; standardising
        puts them on the same footing. Constant channels keep unit scale.
        """
        p = np.asarray(physics, dtype=np.float64)
        if p.ndim != 5 or p.shape[2] != self.cfg.c_p:
            raise ModelInputError(f"physics must be [N,T,{self.cfg.c_p},H,W], got {p.shape}")
        mean = p.mean(axis=(0, 1, 3, 4))
        std = p.std(axis=(0, 1, 3, 4))
        self.buffers["phys.mean"] = mean
        self.buffers["phys.std"] = np.where(std > 1e-8, std, 1.0)

    def _physics_small(self, physics: np.ndarray, size, standardise: bool = True) -> np.ndarray:
        p = resize(np.asarray(physics, dtype=np.float64), size)
        if standardise:
            p = (p - self.buffers["phys.mean"][:, None, None]) / self.buffers["phys.std"][:, None, None]
        if self.cfg.drop:
            keep = np.zeros(p.shape[2], dtype=bool)
            keep[self.cfg.kept_channels()] = True
            p = p * keep[None, None, :, None, None]
        return p

    def encode(self, frames, physics: np.ndarray | None) -> Encoded:
        frames = tn.as_tensor(frames)
        if frames.ndim != 5 or frames.shape[-1] != 3:
            raise ModelInputError(f"frames must be [B,T,H,W,3], got {frames.shape}")
        b, t, h, w, _ = frames.shape
        if t < self.cfg.min_t:
            raise ModelInputError(f"clip has {t} frames, branch needs at least {self.cfg.min_t}")
        needs_physics = self.cfg.phylaax in ("on", "concat")
        if needs_physics and physics is None:
            raise ModelInputError("physics volume required for this branch")
        p = self.p
        # centre pixels so pooled stem features are not dominated by mean brightness
        x = tn.reshape(tn.transpose(frames, (0, 1, 4, 2, 3)), (b * t, 3, h, w))
        x = tn.scale(x - PIXEL_MEAN, 1.0 / PIXEL_SCALE)
        if self.cfg.phylaax == "concat":
            # post-hoc baseline: physics enters as extra input channels, no gating by P
            full = self._physics_small(physics, (h, w)).reshape(b * t, self.cfg.c_p, h, w)
            x = tn.concat([x, Tensor(full)], axis=1)
        x = tn.avg_pool2d(tn.relu(tn.conv2d(x, p["stem.w1"], p["stem.b1"], padding=1)), 2)
        x = tn.avg_pool2d(tn.relu(tn.conv2d(x, p["stem.w2"], p["stem.b2"], padding=1)), 2)
        hs, ws = x.shape[-2:]
        feats = tn.reshape(x, (b, t, self.cfg.channels, hs, ws))
        on = self.cfg.phylaax == "on"
        small = self._physics_small(physics, (hs, ws)) if on else None
        mode = "phylaax" if on else "laa"
        bundle = self.gate(feats, small, mode=mode)
        gated = apply_gate(feats, bundle.m_phy)
        pooled = [tn.mean(gated, axis=(3, 4)), tn.mean(bundle.m_phy, axis=(3, 4))]
        if on:
            pooled.append(tn.mean(bundle.m_cond, axis=(3, 4)))
        z = tn.concat(pooled, axis=2)
        # the resonance target is the raw (unstandardised) volume
        return Encoded(z, bundle, self._physics_small(physics, (hs, ws), standardise=False) if on else None)

    def temporal(self, z: Tensor, training: bool, rng: np.random.Generator | None, dropout: bool | None = None):
        """``training`` selects batch statistics for the pooled-feature norm;
        ``dropout`` (default: same as ``training``) switches dropout on."""
        p = self.p
        dropout = training if dropout is None else dropout
        # pooled features share a large common component across clips; normalising
        # each frame vector exposes the small clip-to-clip differences
        z = self._pool_norm(z, training)
        z = tn.dropout(z, self.cfg.dropout, rng, dropout)
        x = tn.matmul(z, p["in.w"]) + p["in.b"]
        if self.cfg.kind == "recurrent":
            hseq = self._recurrent(x)
        elif self.cfg.kind == "transformer":
            hseq = self._transformer(x)
        else:
            hseq = self._causal_conv(x)
        b, t, f = hseq.shape
        scores = tn.reshape(tn.matmul(hseq, p["pool.a"]), (b, t))
        att = tn.softmax(scores, axis=1)
        clip = tn.sum_(hseq * tn.reshape(att, (b, t, 1)), axis=1)
        logit = tn.reshape(tn.matmul(clip, p["out.w"]) + p["out.b"], (b,))
        return logit, att, hseq

    def _pool_norm(self, z: Tensor, training: bool) -> Tensor:
        """Per-feature standardisation over (clip, frame): batch statistics while
        training (running averages updated), running averages otherwise."""
        if training and z.shape[0] * z.shape[1] > 1:
            mu = tn.mean(z, axis=(0, 1), keepdims=True)
            zc = z - mu
            var = tn.mean(zc * zc, axis=(0, 1), keepdims=True)
            m = POOL_NORM_MOMENTUM
            self.buffers["norm.mean"] = (1 - m) * self.buffers["norm.mean"] + m * mu.data.reshape(-1)
            self.buffers["norm.var"] = (1 - m) * self.buffers["norm.var"] + m * var.data.reshape(-1)
            zn = zc / tn.power(var + POOL_NORM_EPS, 0.5)
        else:
            zn = (z - self.buffers["norm.mean"]) * (1.0 / np.sqrt(self.buffers["norm.var"] + POOL_NORM_EPS))
        return zn * self.p["norm.g"] + self.p["norm.b"]

    def _recurrent(self, x: Tensor) -> Tensor:
        b, t, hdim = x.shape
        outs = {}
        for d, steps in (("fw", range(t)), ("bw", range(t - 1, -1, -1))):
            xw = tn.matmul(x, self.p[f"rnn.{d}.wx"]) + self.p[f"rnn.{d}.b"]
            h = None
            seq = [None] * t
            for s in steps:
                pre = xw[:, s]
                if h is not None:
                    pre = pre + tn.matmul(h, self.p[f"rnn.{d}.wh"])
                h = tn.tanh(pre)
                seq[s] = h
            outs[d] = tn.stack(seq, axis=1)
        return tn.concat([outs["fw"], outs["bw"]], axis=2)

    def _transformer(self, x: Tensor) -> Tensor:
        b, t, hdim = x.shape
        p = self.p
        x = x + sinusoidal_positions(t, hdim)
        for layer in range(2):
            a = tn.layer_norm(x, p[f"tf{layer}.ln1.g"], p[f"tf{layer}.ln1.b"])
            q = tn.matmul(a, p[f"tf{layer}.q"])
            k = tn.matmul(a, p[f"tf{layer}.k"])
            v = tn.matmul(a, p[f"tf{layer}.v"])
            att = tn.softmax(tn.scale(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1 / math.sqrt(hdim)), axis=-1)
            x = x + tn.matmul(tn.matmul(att, v), p[f"tf{layer}.o"])
            a = tn.layer_norm(x, p[f"tf{layer}.ln2.g"], p[f"tf{layer}.ln2.b"])
            hid = tn.relu(tn.matmul(a, p[f"tf{layer}.w1"]) + p[f"tf{layer}.b1"])
            x = x + tn.matmul(hid, p[f"tf{layer}.w2"]) + p[f"tf{layer}.b2"]
        return x

    def _causal_conv(self, x: Tensor) -> Tensor:
        y = tn.transpose(x, (0, 2, 1))  # B,H,T
        for i, dil in enumerate(self.cfg.dilations):
            y = y + tn.relu(tn.conv1d_causal(y, self.p[f"tcn{i}.w"], self.p[f"tcn{i}.b"], dil))
        return tn.transpose(y, (0, 2, 1))

    # -- full passes -------------------------------------------------------------
    def forward(self, frames, physics: np.ndarray | None, mode: str = "eval",
                rng: np.random.Generator | None = None, with_resonance: bool = True) -> BranchOutput:
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        training = mode == "train"
        if training and rng is None and self.cfg.dropout > 0:
            raise ValueError("training mode needs an rng for dropout")
        enc = self.encode(frames, physics)
        logit, att, hseq = self.temporal(enc.z, training, rng)
        res = None
        if with_resonance and self.cfg.phylaax == "on":
            res = resonance_loss(enc.bundle.m_phy, enc.physics, p_avg=physics_average(enc.physics, self.cfg.kept_channels()))
        return BranchOutput(logit, enc.bundle.m_phy, enc.bundle.m_art, res, att, hseq, enc.bundle.alpha)

    __call__ = forward

    def logits(self, frames, physics) -> Tensor:
        """Differentiable eval-mode logits (used by attacks)."""
        return self.forward(frames, physics, mode="eval", with_resonance=False).logit

    def predict_proba(self, frames, physics) -> np.ndarray:
        with tn.no_grad():
            return 1.0 / (1.0 + np.exp(-self.logits(frames, physics).data))

    def prefix_logits(self, frames, physics) -> np.ndarray:
        """Debug head: logit at frame t from attention pooling over frames <= t only."""
        with tn.no_grad():
            out = self.forward(frames, physics, mode="eval", with_resonance=False)
        h = out.frame_states.data
        s = (h @ self.p["pool.a"].data)[..., 0]
        b, t, _ = h.shape
        res = np.empty((b, t))
        for i in range(t):
            w = np.exp(s[:, :i + 1] - s[:, :i + 1].max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            clip = (h[:, :i + 1] * w[..., None]).sum(axis=1)
            res[:, i] = (clip @ self.p["out.w"].data)[:, 0] + self.p["out.b"].data[0]
        return res


def entropy_bits(p: np.ndarray) -> np.ndarray:
    """Binary entropy normalised to [0, 1]."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log(1 - p), 0.0))
    return h / np.log(2.0)


def mc_dropout_predict(branch: Branch, frames, physics, k: int = 32, seed: int = 0,
                       clip_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean probability and normalised predictive entropy over ``k`` dropout passes.

    Each clip draws its masks from its own stream keyed by ``(seed, clip id)``
    (ids default to batch positions), so results do not depend on batching.
    """
    if k < 2:
        raise ValueError("MC dropout needs k >= 2")
    n = len(frames)
    clip_ids = range(n) if clip_ids is None else clip_ids
    if len(clip_ids) != n:
        raise ModelInputError(f"{len(clip_ids)} clip ids for {n} clips")
    rng = [np.random.default_rng([seed, int(c)]) for c in clip_ids]
    with tn.no_grad():
        enc = branch.encode(frames, physics)
        probs = []
        for _ in range(k):
            logit, _, _ = branch.temporal(enc.z, training=False, rng=rng, dropout=True)
            probs.append(1.0 / (1.0 + np.exp(-logit.data)))
    mean = np.mean(probs, axis=0)
    return mean, entropy_bits(mean)
