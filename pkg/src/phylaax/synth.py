"""Synthetic face clips with planted pulse, motion and highlight signals.

A clip is a rigidly moving scene (smooth random texture, an elliptical skin
region, three specular highlights sitting inside the rPPG ROIs) with a green
channel pulse on the skin. Fake clips carry one or more violations confined
to a mask rectangle:

``flow_discontinuity``
    content inside the mask moves with its own rigid motion;
``dead_pulse``
    the pulse is removed inside the mask;
``specular_mismatch``
    the highlight inside the mask switches from a flat-topped (left-skewed
    lightness) profile to a conical (right-skewed) one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import phyt
from .physics import DEFAULT_ROIS, RoiSpec

VIOLATIONS = ("flow_discontinuity", "dead_pulse", "specular_mismatch")
LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")
PULSE_RANGE = (0.75, 3.5)
SKIN_RGB = np.array([0.62, 0.46, 0.38])
BACKGROUND_RGB = np.array([0.30, 0.36, 0.42])


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecipe:
    seed: int
    t: int = 16
    h: int = 32
    w: int = 32
    label: str = "real"
    fps: float = 8.0
    pulse_hz: float = 1.2
    pulse_amp: float = 0.02
    omega: float = 0.0
    velocity: tuple = (0.0, 0.0)
    violations: tuple = ()
    mask_rect: tuple | None = None  # (r0, r1, c0, c1) in pixels
    mask_omega: float = 0.08
    mask_velocity: tuple = (0.0, 0.0)
    strength: float = 1.0
    highlight_amp: float = 0.3
    noise: float = 0.003

    def __post_init__(self):
        if self.label not in LABELS:
            raise RecipeError(f"label must be one of {LABELS}")
        if self.label == "fake" and not self.violations:
            raise RecipeError("fake clips need at least one violation")
        if self.label == "real" and self.violations:
            raise RecipeError("real clips carry no violations")
        unknown = set(self.violations) - set(VIOLATIONS)
        if unknown:
            raise RecipeError(f"unknown violations {sorted(unknown)}")
        if not PULSE_RANGE[0] <= self.pulse_hz <= PULSE_RANGE[1]:
            raise RecipeError(f"pulse_hz {self.pulse_hz} outside {PULSE_RANGE}")
        if self.violations:
            if self.mask_rect is None:
                raise RecipeError("violations need a mask rectangle")
            r0, r1, c0, c1 = self.mask_rect
            if not (0 <= r0 < r1 <= self.h and 0 <= c0 < c1 <= self.w):
                raise RecipeError(f"mask {self.mask_rect} outside the {self.h}x{self.w} frame")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# scene primitives
# ---------------------------------------------------------------------------

def _texture_params(rng: np.random.Generator, n: int, fmin: float, fmax: float, amp: float):
    theta = rng.uniform(0, 2 * np.pi, n)
    freq = rng.uniform(fmin, fmax, n)
    kx, ky = freq * np.cos(theta), freq * np.sin(theta)
    phase = rng.uniform(0, 2 * np.pi, n)
    amps = amp * rng.uniform(0.5, 1.0, n) / np.sqrt(n)
    return kx, ky, phase, amps


def _texture(params, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    kx, ky, phase, amps = params
    arg = 2 * np.pi * (x[..., None] * kx + y[..., None] * ky) + phase
    return (amps * np.cos(arg)).sum(axis=-1)


def _smoothstep(e: np.ndarray) -> np.ndarray:
    e = np.clip(e, 0.0, 1.0)
    return e * e * (3 - 2 * e)


def highlight_profile(rho: np.ndarray, peaked: float) -> np.ndarray:
    """Radial highlight intensity in [0, 1].

    ``peaked = 0`` gives the flat-topped profile ``1 - rho^4`` whose lightness
    values pile up near the top (negative skew); ``peaked = 1`` gives the cone
    ``1 - rho`` whose values pile up near the threshold (positive skew).
    """
    rho = np.clip(rho, 0.0, 1.0)
    flat = 1.0 - rho ** 4
    cone = 1.0 - rho
    return (1.0 - peaked) * flat + peaked * cone


def highlight_centers(h: int, w: int) -> list[tuple[float, float]]:
    """Highlight centres (x, y) in scene coordinates, one per default ROI."""
    out = []
    for x0, y0, x1, y1 in DEFAULT_ROIS.values():
        out.append((0.5 * (x0 + x1) * w - 0.5, 0.5 * (y0 + y1) * h - 0.5))
    return out


def roi_mask_rect(name: str, h: int, w: int) -> tuple[int, int, int, int]:
    return RoiSpec().pixel_rect(name, h, w)


def _rigid_source(x, y, t, cx, cy, omega, vel):
    """Scene coordinates seen at image point (x, y) at frame t."""
    ox, oy = cx + vel[0] * t, cy + vel[1] * t
    c, s = np.cos(omega * t), np.sin(omega * t)
    dx, dy = x - ox, y - oy
    return c * dx + s * dy + cx, -s * dx + c * dy + cy


def _rigid_flow(x, y, t, cx, cy, omega, vel):
    ox, oy = cx + vel[0] * t, cy + vel[1] * t
    c, s = np.cos(omega), np.sin(omega)
    dx, dy = x - ox, y - oy
    return (c - 1) * dx - s * dy + vel[0], s * dx + (c - 1) * dy + vel[1]


def _mask_array(recipe: ClipRecipe) -> np.ndarray:
    m = np.zeros((recipe.h, recipe.w))
    if recipe.violations:
        r0, r1, c0, c1 = recipe.mask_rect
        m[r0:r1, c0:c1] = 1.0
    return m


def _mask_motion(recipe: ClipRecipe):
    """Centre, angular velocity and velocity of the independently moving mask content."""
    r0, r1, c0, c1 = recipe.mask_rect
    k = recipe.strength
    omega = recipe.omega + k * recipe.mask_omega
    vel = (recipe.velocity[0] + k * recipe.mask_velocity[0], recipe.velocity[1] + k * recipe.mask_velocity[1])
    return (c0 + c1 - 1) / 2.0, (r0 + r1 - 1) / 2.0, omega, vel


def _source_coords(recipe: ClipRecipe, t: int):
    h, w = recipe.h, recipe.w
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    sx, sy = _rigid_source(x, y, t, cx, cy, recipe.omega, recipe.velocity)
    if "flow_discontinuity" in recipe.violations:
        # aligned with the scene at t = 0, then follows its own rigid motion
        mx, my, om, vel = _mask_motion(recipe)
        qx, qy = _rigid_source(x, y, t, mx, my, om, vel)
        inside = _mask_array(recipe) > 0
        sx, sy = np.where(inside, qx, sx), np.where(inside, qy, sy)
    return sx, sy


def render_clip(recipe: ClipRecipe) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[T, H, W, 3]`` in [0, 1] and ground-truth mask ``[T, 1, H, W]``."""
    rng = np.random.default_rng(recipe.seed)
    h, w, t_len = recipe.h, recipe.w, recipe.t
    scale = w / 32.0
    skin_tex = _texture_params(rng, 12, 0.03 / scale, 0.12 / scale, 0.10)
    bg_tex = _texture_params(rng, 12, 0.03 / scale, 0.15 / scale, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ax, ay = 0.42 * w, 0.47 * h
    radius = 3.2 * scale
    centers = highlight_centers(h, w)
    mask2d = _mask_array(recipe)
    spec_fake = "specular_mismatch" in recipe.violations
    pulse_gain = 1.0 - recipe.strength * mask2d if "dead_pulse" in recipe.violations else np.ones((h, w))

    frames = np.empty((t_len, h, w, 3))
    for t in range(t_len):
        sx, sy = _source_coords(recipe, t)
        ell = np.sqrt(((sx - cx) / ax) ** 2 + ((sy - cy) / ay) ** 2)
        skin = _smoothstep((1.0 - ell) * ax / 1.5)
        tex_s = _texture(skin_tex, sx, sy)
        tex_b = _texture(bg_tex, sx, sy)
        face = SKIN_RGB + tex_s[..., None] * np.array([1.0, 0.85, 0.7])
        back = BACKGROUND_RGB + tex_b[..., None]
        img = skin[..., None] * face + (1 - skin[..., None]) * back
        hl = np.zeros((h, w))
        for hx, hy in centers:
            rho = np.hypot(sx - hx, sy - hy) / radius
            peaked = np.zeros((h, w))
            if spec_fake:
                # the manipulated highlight is the one whose centre lies in the mask
                r0, r1, c0, c1 = recipe.mask_rect
                if r0 <= hy + 0.5 < r1 and c0 <= hx + 0.5 < c1:
                    peaked = recipe.strength * mask2d
            hl = np.maximum(hl, highlight_profile(rho, peaked) * (rho < 1))
        img = img + recipe.highlight_amp * (hl * skin)[..., None]
        pulse = recipe.pulse_amp * np.sin(2 * np.pi * recipe.pulse_hz * t / recipe.fps + phase)
        img[..., 1] += pulse * skin * pulse_gain
        img += rng.normal(0.0, recipe.noise, img.shape)
        frames[t] = img
    frames = np.clip(frames, 0.0, 1.0)
    mask = np.broadcast_to(mask2d, (t_len, 1, h, w)).copy()
    return frames, mask


def exact_flow(recipe: ClipRecipe) -> np.ndarray:
    """Generator-known displacement field ``[T-1, H, W, 2]``."""
    h, w = recipe.h, recipe.w
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    out = np.empty((recipe.t - 1, h, w, 2))
    for t in range(recipe.t - 1):
        vx, vy = _rigid_flow(x, y, t, cx, cy, recipe.omega, recipe.velocity)
        if "flow_discontinuity" in recipe.violations:
            mx, my, om, vel = _mask_motion(recipe)
            ix, iy = _rigid_flow(x, y, t, mx, my, om, vel)
            inside = _mask_array(recipe) > 0
            vx, vy = np.where(inside, ix, vx), np.where(inside, iy, vy)
        out[t, ..., 0], out[t, ..., 1] = vx, vy
    return out


# ---------------------------------------------------------------------------
# recipes and corpora
# ---------------------------------------------------------------------------

def sample_recipe(rng: np.random.Generator, label: str, violations: tuple = (), t: int = 16,
                  hw: int = 32, fps: float = 8.0, difficulty: float = 0.0) -> ClipRecipe:
    """Draw motion, pulse and mask parameters for one clip."""
    seed = int(rng.integers(0, 2**63 - 1))
    mask_rect = None
    if violations:
        roi = str(rng.choice(list(DEFAULT_ROIS)))
        mask_rect = roi_mask_rect(roi, hw, hw)
    sign = rng.choice([-1.0, 1.0])
    return ClipRecipe(
        seed=seed, t=t, h=hw, w=hw, label=label, fps=fps,
        pulse_hz=float(rng.uniform(1.0, 1.5)),
        pulse_amp=float(rng.uniform(0.015, 0.025)),
        omega=float(rng.uniform(-0.015, 0.015)),
        velocity=(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.2, 0.2))),
        violations=tuple(violations),
        mask_rect=mask_rect,
        mask_omega=float(sign * rng.uniform(0.08, 0.15)),
        mask_velocity=tuple(float(v) for v in rng.choice([-1.0, 1.0], 2) * rng.uniform(0.3, 0.8, 2)),
        strength=float(1.0 - difficulty),
    )


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    split: str
    digest: str
    mask_path: str


@dataclass
class CorpusManifest:
    """Line-delimited corpus index: ``path, label, split, digest, mask path`` per line."""

    records: list
    root: Path | None = None

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def write(self, path) -> None:
        lines = ["\t".join([r.path, r.label, r.split, r.digest, r.mask_path]) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ValueError(f"manifest line needs 5 tab-separated fields: {line!r}")
            records.append(ManifestRecord(*cols))
        return cls(records, path.parent)

    def __eq__(self, other):
        return isinstance(other, CorpusManifest) and self.records == other.records

    @property
    def meta(self) -> dict:
        p = (self.root or Path(".")) / "corpus.json"
        return json.loads(p.read_text()) if p.exists() else {"fps": 8.0}

    @property
    def fps(self) -> float:
        return float(self.meta.get("fps", 8.0))

    def recipes(self) -> dict:
        """Digest -> recipe dict from the ``recipes.jsonl`` sidecar (empty if absent)."""
        p = (self.root or Path(".")) / "recipes.jsonl"
        if not p.exists():
            return {}
        out = {}
        for line in p.read_text().splitlines():
            d = json.loads(line)
            out[d["digest"]] = d["recipe"]
        return out

    def load(self, rec: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
        root = self.root or Path(".")
        return phyt.load(root / rec.path), phyt.load(root / rec.mask_path)


def assign_splits(labels: list[str], rng: np.random.Generator, fractions=(0.70, 0.15, 0.15)) -> list[str]:
    """Stratified split tags: each label group is cut 70/15/15 independently."""
    out = [""] * len(labels)
    for lab in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == lab]
        idx = list(rng.permutation(idx))
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        for j, i in enumerate(idx):
            out[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return out


def corpus_recipes(n_clips: int, t: int = 16, hw: int = 32, seed: int = 0, fps: float = 8.0,
                   difficulty: float = 0.0) -> tuple[list[ClipRecipe], list[str]]:
    if n_clips < 20:
        raise ValueError(f"corpus needs at least 20 clips, got {n_clips}")
    rng = np.random.default_rng(seed)
    n_fake = n_clips // 2
    labels = ["real"] * (n_clips - n_fake) + ["fake"] * n_fake
    labels = [labels[i] for i in rng.permutation(n_clips)]
    order = rng.permutation(n_fake)
    kinds = [VIOLATIONS[k % len(VIOLATIONS)] for k in order]
    recipes, k = [], 0
    for i, lab in enumerate(labels):
        clip_rng = np.random.default_rng([seed, i])
        viol = ()
        if lab == "fake":
            viol = (kinds[k],)
            k += 1
        recipes.append(sample_recipe(clip_rng, lab, viol, t, hw, fps, difficulty))
    splits = assign_splits(labels, rng)
    return recipes, splits


def generate_corpus(out_dir, n_clips: int = 400, t: int = 16, hw: int = 32, seed: int = 0,
                    fps: float = 8.0, difficulty: float = 0.0) -> CorpusManifest:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    recipes, splits = corpus_recipes(n_clips, t, hw, seed, fps, difficulty)
    records, recipe_lines = [], []
    for i, (rec, split) in enumerate(zip(recipes, splits)):
        frames, mask = render_clip(rec)
        cpath, mpath = f"clips/clip_{i:05d}.phyt", f"masks/mask_{i:05d}.phyt"
        phyt.save(out / cpath, frames)
        phyt.save(out / mpath, mask)
        digest = rec.digest()
        records.append(ManifestRecord(cpath, rec.label, split, digest, mpath))
        recipe_lines.append(json.dumps({"digest": digest, "recipe": dataclasses.asdict(rec)}, sort_keys=True))
    meta = {"n": n_clips, "t": t, "hw": hw, "seed": seed, "fps": fps, "difficulty": difficulty}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    (out / "recipes.jsonl").write_text("\n".join(recipe_lines) + "\n")
    manifest = CorpusManifest(records, out)
    manifest.write(out / "manifest.tsv")
    return manifest
