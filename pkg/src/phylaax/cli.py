"""Command-line entry point.

Every subcommand reads its options from three layers, highest first:
explicit flags, a ``key = value`` file passed with ``--config``, then
built-in defaults. The global seed falls back to ``PHYLAA_SEED`` when
neither a flag nor the file sets it. Each run writes the fully resolved
configuration next to its outputs, and that file alone replays the run.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import phyt
from . import physics as phx
from . import synth
from .adversarial import AttackConfig, SmoothingConfig, fgsm, pgd, smooth_certify
from .ensemble import Ensemble, branch_logits, branch_needs_physics
from .explain import explain_clip, write_pgm
from .experiment import ExperimentConfig, run_ablation
from .losses import LossConfig
from .metrics import detection_report
from .models import CONDITIONERS, KINDS, PHYLAAX_MODES, Branch, BranchConfig
from .training import ClipSet, OptimConfig, Trainer, physics_batch

log = logging.getLogger("phylaax")

CONFIG_NAME = "config.txt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Opt:
    name: str  # flag without leading dashes; the config key swaps '-' for '_'
    type: type = str
    default: object = None
    repeat: bool = False
    choices: tuple | None = None
    flag: bool = False  # boolean switch
    required: bool = False
    help: str = ""

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


COMMON = [
    Opt("seed", int, None, help="global seed (default: $PHYLAA_SEED, else 0)"),
    Opt("threads", int, 1, help="worker processes for per-clip work"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("out", required=True, help="output corpus directory"),
        Opt("n", int, 400), Opt("t", int, 16), Opt("hw", int, 32),
        Opt("difficulty", float, 0.0), Opt("fps", float, 8.0),
    ],
    "extract": [
        Opt("clip", required=True, help="PHYT clip [T,H,W,3]"),
        Opt("out", required=True, help="output PHYT physics volume [T,C_p,H,W]"),
        Opt("fps", float, 8.0), Opt("bands", int, 4),
        Opt("roi", repeat=True, help="name=x0,y0,x1,y1 in normalised coordinates (repeatable)"),
        Opt("highlight-percentile", float, 95.0),
    ],
    "train": [
        Opt("corpus", required=True), Opt("out", required=True, help="checkpoint path"),
        Opt("branch", str, "recurrent", choices=KINDS), Opt("epochs", int, 6),
        Opt("phylaax", str, "on", choices=PHYLAAX_MODES),
        Opt("drop-conditioner", repeat=True, choices=CONDITIONERS),
        Opt("adv-mix", float, 0.0), Opt("lr", float, 2e-2), Opt("batch-size", int, 16),
        Opt("crop", int, 8), Opt("channels", int, 8), Opt("hidden", int, 16),
        Opt("aux-weight", float, 0.5), Opt("res-weight", float, 0.3),
        Opt("t0", int, 2), Opt("t-mult", int, 2),
    ],
    "eval": [
        Opt("corpus", required=True), Opt("checkpoint", repeat=True, required=True),
        Opt("out", required=True, help="output directory"), Opt("split", str, "test", choices=synth.SPLITS),
        Opt("fixed-weights", flag=True), Opt("mc-samples", int, 32),
    ],
    "attack": [
        Opt("corpus", required=True), Opt("checkpoint", repeat=True, required=True),
        Opt("out", required=True), Opt("kind", str, "pgd", choices=("fgsm", "pgd", "transfer")),
        Opt("eps", float, 0.02), Opt("step", float, 0.002), Opt("iters", int, 10),
        Opt("surrogate", help="checkpoint crafting transfer examples"),
        Opt("split", str, "test", choices=synth.SPLITS), Opt("limit", int, 40),
    ],
    "certify": [
        Opt("corpus", required=True), Opt("checkpoint", repeat=True, required=True),
        Opt("out", required=True), Opt("sigma", float, 0.25), Opt("k", int, 100),
        Opt("confidence", float, 0.999), Opt("split", str, "test", choices=synth.SPLITS),
        Opt("limit", int, 10),
    ],
    "explain": [
        Opt("checkpoint", required=True), Opt("clip", required=True), Opt("out", required=True),
        Opt("fps", float, 8.0),
    ],
    "ablate": [
        Opt("corpus", required=True), Opt("out", required=True),
        Opt("seeds", str, "0,1,2", help="comma-separated seed list"),
        Opt("epochs", int, 6), Opt("lr", float, 2e-2), Opt("pgd-clips", int, 40),
        Opt("mc-samples", int, 32), Opt("no-pgd", flag=True),
    ],
}


# ---------------------------------------------------------------------------
# configuration layers
# ---------------------------------------------------------------------------

def parse_config_text(text: str, opts: list[Opt]) -> dict:
    by_key = {o.key: o for o in opts}
    out: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in by_key:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        opt = by_key[key]
        val = _convert(opt, value)
        if opt.repeat:
            out.setdefault(key, []).append(val)
        else:
            out[key] = val
    return out


def _convert(opt: Opt, value):
    if opt.flag:
        low = str(value).lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{opt.key} expects a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    try:
        val = opt.type(value)
    except ValueError as exc:
        raise ConfigError(f"{opt.key}: cannot read {value!r} as {opt.type.__name__}") from exc
    if opt.choices and val not in opt.choices:
        raise ConfigError(f"{opt.key} must be one of {opt.choices}, got {val!r}")
    return val


def resolve(command: str, flags: dict, config_text: str | None = None, env=None) -> dict:
    """Merge defaults, config file and explicit flags (that order, later wins)."""
    env = os.environ if env is None else env
    opts = COMMON + COMMANDS[command]
    cfg = {o.key: (list(o.default or []) if o.repeat else o.default) for o in opts}
    from_file = parse_config_text(config_text, opts) if config_text else {}
    cfg.update(from_file)
    cfg.update(flags)
    if cfg["seed"] is None:
        cfg["seed"] = int(env.get("PHYLAA_SEED", 0))
    for o in opts:
        if o.required and (cfg[o.key] is None or cfg[o.key] == []):
            raise ConfigError(f"missing required option --{o.name}")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def format_config(command: str, cfg: dict) -> str:
    lines = [f"# {command}"]
    for o in COMMON + COMMANDS[command]:
        v = cfg[o.key]
        if o.repeat:
            lines.extend(f"{o.key} = {item}" for item in v)
        elif v is not None:
            lines.append(f"{o.key} = {str(v).lower() if o.flag else v}")
    return "\n".join(lines) + "\n"


def write_config(command: str, cfg: dict, path) -> None:
    Path(path).write_text(format_config(command, cfg))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phylaax", description="Physics-conditioned deepfake detection toolkit")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value file; explicit flags override it")
        for o in COMMON + opts:
            kw = {"dest": o.key, "default": argparse.SUPPRESS, "help": o.help or None}
            if o.flag:
                p.add_argument(f"--{o.name}", action="store_true", **kw)
            elif o.repeat:
                p.add_argument(f"--{o.name}", action="append", type=o.type, choices=o.choices, **kw)
            else:
                p.add_argument(f"--{o.name}", type=o.type, choices=o.choices, **kw)
    return parser


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def parallel_map(fn, items, threads: int) -> list:
    """Ordered map; results do not depend on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


@dataclass(frozen=True)
class _Extract:
    fps: float
    bands: int
    rois: phx.RoiSpec | None = None
    percentile: float = 95.0

    def __call__(self, frames):
        return phx.assemble(frames, self.rois, self.fps, self.bands, self.percentile).stacked


def load_split(manifest: synth.CorpusManifest, split: str, bands: int, threads: int = 1,
               limit: int | None = None) -> tuple[ClipSet, list]:
    recs = manifest.split(split)
    if limit is not None:
        recs = recs[:limit]
    if not recs:
        raise ConfigError(f"corpus has no {split!r} clips")
    loaded = [manifest.load(r) for r in recs]
    frames = np.stack([f for f, _ in loaded])
    masks = np.stack([m for _, m in loaded])
    phys = np.stack(parallel_map(_Extract(manifest.fps, bands), list(frames), threads))
    labels = np.array([1.0 if r.label == "fake" else 0.0 for r in recs])
    return ClipSet(frames, phys, masks, labels), recs


def read_manifest(corpus) -> synth.CorpusManifest:
    path = Path(corpus) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return synth.CorpusManifest.read(path)


def load_branches(paths) -> list[Branch]:
    out = []
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint {p} not found")
        out.append(Branch.load(p))
    return out


def branch_name(branch: Branch, path) -> str:
    return branch.meta.get("name", Path(path).stem) if hasattr(branch, "meta") else Path(path).stem


def detector(branches: list[Branch], val: ClipSet | None, cfg: dict):
    """Single branch as-is, or a calibrated fusion of several."""
    if len(branches) == 1:
        return branches[0]
    ens = Ensemble(branches, fixed=bool(cfg.get("fixed_weights")), mc_samples=cfg.get("mc_samples", 32),
                   seed=cfg["seed"])
    if val is not None:
        ens.calibrate(val.frames, val.physics, val.labels)
    return ens


def _needs_physics(model) -> bool:
    if isinstance(model, Ensemble):
        return any(branch_needs_physics(b) for b in model.branches)
    return branch_needs_physics(model)


def _proba(model, frames, physics) -> np.ndarray:
    if isinstance(model, Ensemble):
        return model.predict_proba(frames, physics)
    return 1.0 / (1.0 + np.exp(-branch_logits(model, frames, physics)))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"])
    synth.generate_corpus(out, cfg["n"], cfg["t"], cfg["hw"], cfg["seed"], cfg["fps"], cfg["difficulty"])
    write_config("gen-data", cfg, out / CONFIG_NAME)
    log.info("wrote %d clips to %s", cfg["n"], out)


def parse_roi(text: str) -> tuple[str, tuple]:
    try:
        name, coords = text.split("=", 1)
        vals = tuple(float(v) for v in coords.split(","))
    except ValueError as exc:
        raise ConfigError(f"ROI must read name=x0,y0,x1,y1, got {text!r}") from exc
    if len(vals) != 4:
        raise ConfigError(f"ROI {name!r} needs four coordinates")
    return name.strip(), vals


def cmd_extract(cfg: dict) -> None:
    frames = phyt.load(cfg["clip"])
    rects = dict(phx.DEFAULT_ROIS)
    rects.update(parse_roi(r) for r in cfg["roi"])
    vol = phx.assemble(frames, phx.RoiSpec(rects), cfg["fps"], cfg["bands"], cfg["highlight_percentile"])
    out = Path(cfg["out"])
    phyt.save(out, vol.stacked)
    write_config("extract", cfg, out.with_name(out.name + ".config.txt"))


def cmd_train(cfg: dict) -> None:
    manifest = read_manifest(cfg["corpus"])
    data, _ = load_split(manifest, "train", 4, cfg["threads"])
    bcfg = BranchConfig(kind=cfg["branch"], channels=cfg["channels"], hidden=cfg["hidden"],
                        phylaax=cfg["phylaax"], drop=tuple(sorted(set(cfg["drop_conditioner"]))))
    branch = Branch(bcfg, seed=cfg["seed"])
    optim = OptimConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], adv_mix=cfg["adv_mix"], crop=cfg["crop"],
                        t0=cfg["t0"], t_mult=cfg["t_mult"])
    losses = LossConfig(aux_mask_weight=cfg["aux_weight"], resonance_weight=cfg["res_weight"])
    trainer = Trainer(branch, optim, losses, physics_batch(manifest.fps, bcfg.bands), seed=cfg["seed"])
    history = trainer.fit(data, cfg["epochs"])
    for s in history:
        log.info("epoch %d loss %.4f focal %.4f aux %.4f res %.4f", s.epoch, s.loss, s.focal, s.aux, s.res)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    branch.save(out, {"name": out.stem, "seed": str(cfg["seed"]), "fps": repr(manifest.fps)})
    _write_csv(out.with_name(out.name + ".history.csv"), ["epoch", "loss", "focal", "aux", "res", "lr"],
               [[s.epoch, _fmt(s.loss), _fmt(s.focal), _fmt(s.aux), _fmt(s.res), _fmt(s.lr)] for s in history])
    write_config("train", cfg, out.with_name(out.name + ".config.txt"))


def _model_and_data(cfg: dict, limit: int | None = None):
    manifest = read_manifest(cfg["corpus"])
    branches = load_branches(cfg["checkpoint"])
    bands = branches[0].cfg.bands
    data, recs = load_split(manifest, cfg["split"], bands, cfg["threads"], limit)
    val = load_split(manifest, "val", bands, cfg["threads"])[0] if len(branches) > 1 else None
    return manifest, branches, data, recs, detector(branches, val, cfg)


def cmd_eval(cfg: dict) -> None:
    manifest, branches, data, recs, model = _model_and_data(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    names = [branch_name(b, p) for b, p in zip(branches, cfg["checkpoint"])]
    probs = {n: 1.0 / (1.0 + np.exp(-branch_logits(b, data.frames, data.physics))) for n, b in zip(names, branches)}
    if isinstance(model, Ensemble):
        probs["ensemble"] = model.predict_proba(data.frames, data.physics)
    rows = []
    for name, p in probs.items():
        for metric, value in detection_report(p, data.labels).items():
            rows.append([metric, name, _fmt(value), cfg["seed"]])
    _write_csv(out / "metrics.csv", ["metric", "branch", "value", "seed"], rows)
    _write_csv(out / "scores.csv", ["clip", "label", *probs],
               [[r.path, r.label, *(_fmt(p[i]) for p in probs.values())] for i, r in enumerate(recs)])
    write_config("eval", cfg, out / CONFIG_NAME)


def cmd_attack(cfg: dict) -> None:
    manifest, branches, data, recs, model = _model_and_data(cfg, cfg["limit"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    extract = physics_batch(manifest.fps, branches[0].cfg.bands)
    labels = data.labels.astype(np.int64)
    atk = AttackConfig(cfg["kind"], cfg["eps"], cfg["step"], cfg["iters"], cfg["surrogate"], cfg["seed"])
    if atk.kind == "transfer":
        if not cfg["surrogate"]:
            raise ConfigError("transfer attacks need --surrogate")
        crafter = Branch.load(cfg["surrogate"])
        pfn = extract if branch_needs_physics(crafter) else (lambda f: None)
        adv = pgd(crafter, data.frames, labels, replace(atk, kind="pgd"), pfn)
    else:
        pfn = extract if _needs_physics(model) else (lambda f: None)
        adv = (fgsm if atk.kind == "fgsm" else pgd)(model, data.frames, labels, atk, pfn)
    clean = _proba(model, data.frames, data.physics)
    adv_p = _proba(model, adv, extract(adv))
    _write_csv(out / "attack.csv", ["clip", "label", "clean_score", "adv_score"],
               [[r.path, r.label, _fmt(clean[i]), _fmt(adv_p[i])] for i, r in enumerate(recs)])
    write_config("attack", cfg, out / CONFIG_NAME)


def cmd_certify(cfg: dict) -> None:
    manifest, branches, data, recs, model = _model_and_data(cfg, cfg["limit"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    extract = physics_batch(manifest.fps, branches[0].cfg.bands)
    scfg = SmoothingConfig(cfg["sigma"], cfg["k"], cfg["confidence"])
    rng = np.random.default_rng(cfg["seed"])
    needs = _needs_physics(model)

    def predict(noisy):
        # the detector expects pixels in [0, 1]; physics follows the noisy clip
        noisy = np.clip(noisy, 0.0, 1.0)
        return _proba(model, noisy, extract(noisy) if needs else np.zeros(len(noisy)))

    rows = []
    for i, r in enumerate(recs):
        c = smooth_certify(predict, data.frames[i], scfg, rng)
        rows.append([r.path, r.label, c.prediction, c.votes, _fmt(c.p_lower), _fmt(c.radius), int(c.abstain)])
    _write_csv(out / "certify.csv", ["clip", "label", "prediction", "votes", "p_lower", "radius", "abstain"], rows)
    write_config("certify", cfg, out / CONFIG_NAME)


def cmd_explain(cfg: dict) -> None:
    branch = load_branches([cfg["checkpoint"]])[0]
    frames = phyt.load(cfg["clip"])
    physics = None
    if branch_needs_physics(branch):
        physics = phx.assemble(frames, fps=cfg["fps"], bands=branch.cfg.bands).stacked
    ex = explain_clip(branch, frames, physics)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "m_phy.pgm", ex.m_phy)
    write_pgm(out / "saliency.pgm", ex.saliency)
    _write_csv(out / "frame_importance.csv", ["frame", "weight"],
               [[t, f"{w:.8f}"] for t, w in enumerate(ex.frame_importance)])
    write_config("explain", cfg, out / CONFIG_NAME)


def cmd_ablate(cfg: dict) -> None:
    manifest = read_manifest(cfg["corpus"])
    try:
        seeds = tuple(int(s) for s in cfg["seeds"].split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"seeds must be a comma-separated integer list, got {cfg['seeds']!r}") from exc
    ecfg = ExperimentConfig(seeds=seeds, epochs=cfg["epochs"], lr=cfg["lr"], pgd_clips=cfg["pgd_clips"],
                            mc_samples=cfg["mc_samples"])
    sets = {s: load_split(manifest, s, ecfg.bands, cfg["threads"])[0] for s in synth.SPLITS}
    result = run_ablation(sets, ecfg, manifest.fps, with_pgd=not cfg["no_pgd"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result.write_report(out / "ablation.csv")
    if not cfg["no_pgd"]:
        result.write_pgd(out / "pgd.csv")
    _write_csv(out / "checks.csv", ["check", "holds"], [[k, int(v)] for k, v in result.checks().items()])
    write_config("ablate", cfg, out / CONFIG_NAME)


HANDLERS = {
    "gen-data": cmd_gen_data, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
    "attack": cmd_attack, "certify": cmd_certify, "explain": cmd_explain, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=args.pop("log_level"), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config_path = args.pop("config", None)
    try:
        text = Path(config_path).read_text() if config_path else None
        cfg = resolve(command, args, text)
        HANDLERS[command](cfg)
    except (ConfigError, FileNotFoundError, ValueError, phyt.FormatError) as exc:
        log.error("%s: %s", command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
