"""Desk-scale ablation harness: eight arms over three seeds on a synthetic corpus.

Arms that differ only in how the ensemble fuses its branches reuse the
branches trained for the full model, so a run trains six configurations of
three branches per seed.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import physics as phx
from . import synth
from .adversarial import AttackConfig, pgd
from .ensemble import Ensemble, branch_needs_physics
from .losses import LossConfig
from .metrics import detection_report
from .models import KINDS, Branch, BranchConfig
from .training import ClipSet, OptimConfig, Trainer, physics_batch

log = logging.getLogger(__name__)

ARMS = (
    "no-physics",
    "post-hoc-concat",
    "phylaax",
    "phylaax-no-flow",
    "phylaax-no-spec",
    "phylaax-no-rppg",
    "phylaax-fixed-weights",
    "phylaax-uncertainty-only",
)
# arm -> (phylaax mode, dropped conditioners) for arms that need their own training
TRAINED = {
    "no-physics": ("off", ()),
    "post-hoc-concat": ("concat", ()),
    "phylaax": ("on", ()),
    "phylaax-no-flow": ("on", ("flow",)),
    "phylaax-no-spec": ("on", ("spec",)),
    "phylaax-no-rppg": ("on", ("rppg",)),
}
# arm -> fusion variant applied to the "phylaax" branches
FUSION_VARIANTS = {"phylaax-fixed-weights": "fixed", "phylaax-uncertainty-only": "no-resonance"}
METRICS = ("auc", "accuracy", "eer", "f1", "ece")
PGD_ARMS = ("no-physics", "phylaax")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    epochs: int = 6
    lr: float = 2e-2
    t0: int = 2
    t_mult: int = 2
    batch_size: int = 16
    crop: int = 8
    channels: int = 8
    hidden: int = 16
    bands: int = 4
    aux_mask_weight: float = 0.5
    resonance_weight: float = 0.3
    mc_samples: int = 32
    pgd_clips: int = 40
    pgd_epsilon: float = 0.02
    pgd_step: float = 0.002
    pgd_iters: int = 10

    def __post_init__(self):
        if len(self.seeds) < 1 or self.epochs < 1:
            raise ValueError("need at least one seed and one epoch")
        if self.pgd_clips < 2:
            raise ValueError("pgd_clips must be >= 2")

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, t0=self.t0, t_mult=self.t_mult, batch_size=self.batch_size,
                           adv_mix=0.0, crop=self.crop)

    def losses(self) -> LossConfig:
        return LossConfig(aux_mask_weight=self.aux_mask_weight, resonance_weight=self.resonance_weight)


def load_clipsets(manifest: synth.CorpusManifest, bands: int = 4) -> dict[str, ClipSet]:
    """Frames, masks, labels and freshly extracted physics for every split."""
    out = {}
    for split in synth.SPLITS:
        frames, masks, phys, labels = [], [], [], []
        for rec in manifest.split(split):
            f, m = manifest.load(rec)
            frames.append(f)
            masks.append(m)
            phys.append(phx.assemble(f, fps=manifest.fps, bands=bands).stacked)
            labels.append(1.0 if rec.label == "fake" else 0.0)
        if not frames:
            raise ValueError(f"corpus has no {split!r} clips")
        out[split] = ClipSet(np.stack(frames), np.stack(phys), np.stack(masks), np.array(labels))
    return out


def branch_seed(seed: int, kind: str) -> int:
    return 1000 * seed + KINDS.index(kind)


def train_branches(data: ClipSet, mode: str, drop: tuple, seed: int, cfg: ExperimentConfig,
                   fps: float = 8.0) -> list[Branch]:
    branches = []
    for kind in KINDS:
        bcfg = BranchConfig(kind=kind, channels=cfg.channels, hidden=cfg.hidden, phylaax=mode, drop=drop,
                            bands=cfg.bands)
        s = branch_seed(seed, kind)
        branch = Branch(bcfg, seed=s)
        trainer = Trainer(branch, cfg.optim(), cfg.losses(), physics_batch(fps, cfg.bands), seed=s)
        trainer.fit(data, cfg.epochs)
        branches.append(branch)
    return branches


def build_ensemble(branches: list[Branch], val: ClipSet, variant: str | None, cfg: ExperimentConfig,
                   seed: int) -> Ensemble:
    ens = Ensemble(branches, fixed=variant == "fixed", mc_samples=cfg.mc_samples, seed=seed,
                   names=list(KINDS))
    ens.calibrate(val.frames, val.physics, val.labels)
    if variant == "no-resonance":
        ens.r = np.ones(len(branches))
    return ens


def pgd_accuracy(ens: Ensemble, data: ClipSet, cfg: ExperimentConfig, seed: int, fps: float = 8.0) -> tuple[float, float]:
    """Clean and PGD accuracy of the fused detector on the first ``pgd_clips`` test clips."""
    sub = data.subset(np.arange(min(cfg.pgd_clips, len(data))))
    needs = any(branch_needs_physics(b) for b in ens.branches)
    extract = physics_batch(fps, cfg.bands)
    pfn = extract if needs else (lambda f: None)
    labels = sub.labels.astype(np.int64)
    clean = (ens.predict_proba(sub.frames, sub.physics) >= 0.5).astype(np.int64)
    atk = AttackConfig("pgd", cfg.pgd_epsilon, cfg.pgd_step, cfg.pgd_iters, seed=seed)
    adv = pgd(ens, sub.frames, labels, atk, pfn)
    adv_pred = (ens.predict_proba(adv, extract(adv) if needs else sub.physics) >= 0.5).astype(np.int64)
    return float(np.mean(clean == labels)), float(np.mean(adv_pred == labels))


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)  # dicts: arm, seed, metrics
    pgd: list = field(default_factory=list)  # dicts: arm, seed, clean, adversarial
    seconds: float = 0.0

    def values(self, arm: str, metric: str = "auc") -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["arm"] == arm])

    def mean(self, arm: str, metric: str = "auc") -> float:
        return float(self.values(arm, metric).mean())

    def pgd_mean(self, arm: str) -> float:
        return float(np.mean([r["adversarial"] for r in self.pgd if r["arm"] == arm]))

    def summary(self) -> list[dict]:
        out = []
        for arm in ARMS:
            row = {"arm": arm, "seed": "mean±std"}
            for m in METRICS:
                v = self.values(arm, m)
                row[m] = f"{v.mean():.4f}±{v.std():.4f}"
            out.append(row)
        return out

    def checks(self) -> dict[str, bool]:
        """Directional claims evaluated on seed means."""
        m = self.mean
        out = {
            "ensemble_auc_ge_0.95": m("phylaax") >= 0.95,
            "phylaax_gt_concat": m("phylaax") > m("post-hoc-concat"),
            "concat_gt_no_physics": m("post-hoc-concat") > m("no-physics"),
            "drop_flow_reduces_auc": m("phylaax-no-flow") < m("phylaax"),
            "drop_spec_reduces_auc": m("phylaax-no-spec") < m("phylaax"),
            "drop_rppg_reduces_auc": m("phylaax-no-rppg") < m("phylaax"),
            "adaptive_ge_fixed": m("phylaax") >= m("phylaax-fixed-weights"),
        }
        if self.pgd:
            out["pgd_phylaax_ge_off"] = self.pgd_mean("phylaax") >= self.pgd_mean("no-physics")
        return out

    def write_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["arm", "seed", *METRICS], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({"arm": r["arm"], "seed": r["seed"], **{m: f"{r[m]:.6f}" for m in METRICS}})
            for r in self.summary():
                w.writerow(r)

    def write_pgd(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["arm", "seed", "clean_accuracy", "pgd_accuracy"], lineterminator="\n")
            w.writeheader()
            for r in self.pgd:
                w.writerow({"arm": r["arm"], "seed": r["seed"], "clean_accuracy": f"{r['clean']:.6f}",
                            "pgd_accuracy": f"{r['adversarial']:.6f}"})


def run_ablation(sets: dict[str, ClipSet], cfg: ExperimentConfig = ExperimentConfig(), fps: float = 8.0,
                 with_pgd: bool = True) -> ExperimentResult:
    result = ExperimentResult()
    start = time.perf_counter()
    train, val, test = sets["train"], sets["val"], sets["test"]
    for seed in cfg.seeds:
        trained = {}
        for arm, (mode, drop) in TRAINED.items():
            t = time.perf_counter()
            trained[arm] = train_branches(train, mode, drop, seed, cfg, fps)
            log.info("seed %d arm %s trained in %.1fs", seed, arm, time.perf_counter() - t)
        for arm in ARMS:
            variant = FUSION_VARIANTS.get(arm)
            branches = trained["phylaax" if variant else arm]
            ens = build_ensemble(branches, val, variant, cfg, seed)
            probs = ens.predict_proba(test.frames, test.physics)
            rep = detection_report(probs, test.labels)
            result.rows.append({"arm": arm, "seed": seed, **rep})
            log.info("seed %d arm %s auc %.4f", seed, arm, rep["auc"])
            if with_pgd and arm in PGD_ARMS:
                clean, adv = pgd_accuracy(ens, test, cfg, seed, fps)
                result.pgd.append({"arm": arm, "seed": seed, "clean": clean, "adversarial": adv})
                log.info("seed %d arm %s pgd accuracy %.3f (clean %.3f)", seed, arm, adv, clean)
    result.seconds = time.perf_counter() - start
    return result


def config_dict(cfg: ExperimentConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}


def run_from_corpus(corpus_dir, out_dir, cfg: ExperimentConfig = ExperimentConfig(), with_pgd: bool = True) -> ExperimentResult:
    manifest = synth.CorpusManifest.read(Path(corpus_dir) / "manifest.tsv")
    sets = load_clipsets(manifest, cfg.bands)
    result = run_ablation(sets, cfg, manifest.fps, with_pgd)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_report(out / "ablation.csv")
    if with_pgd:
        result.write_pgd(out / "pgd.csv")
    return result
