import csv
import shutil
from pathlib import Path

import numpy as np
import pytest

from phylaax import cli, phyt, synth
from phylaax.explain import read_pgm

TRAIN = ["--epochs", "1", "--channels", "4", "--hidden", "8", "--batch-size", "8", "--crop", "8", "--seed", "1"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def snapshot(path: Path, skip=()) -> dict:
    """Bytes of every file under ``path`` (or of the file itself)."""
    if path.is_file():
        return {path.name: path.read_bytes()}
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name not in skip}


def twice(out: Path, argv) -> tuple[dict, dict]:
    """Run the same command twice into the same place, clearing it in between."""
    assert run(*argv) == 0
    first = snapshot(out)
    shutil.rmtree(out) if out.is_dir() else out.unlink()
    assert run(*argv) == 0
    return first, snapshot(out)


@pytest.fixture(scope="module")
def ckpt(tiny_corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    paths = []
    for kind, mode in (("recurrent", "on"), ("causal-conv", "off")):
        p = d / f"{kind}-{mode}.phya"
        assert run("train", "--corpus", tiny_corpus, "--out", p, "--branch", kind, "--phylaax", mode, *TRAIN) == 0
        paths.append(p)
    return paths


@pytest.fixture(scope="module")
def clip_file(tiny_corpus, tmp_path_factory):
    m = synth.CorpusManifest.read(tiny_corpus / "manifest.tsv")
    rec = next(r for r in m.split("test") if r.label == "fake")
    frames, mask = m.load(rec)
    path = tmp_path_factory.mktemp("clip") / "clip.phyt"
    phyt.save(path, frames)
    return path, frames, mask


# -- configuration layers --------------------------------------------------------

def test_precedence_defaults_file_flags():
    text = "out = a\nn = 10\nhw = 16\n"
    cfg = cli.resolve("gen-data", {"hw": 24}, text, env={})
    assert (cfg["out"], cfg["n"], cfg["hw"], cfg["t"]) == ("a", 10, 24, 16)
    assert cfg["seed"] == 0


def test_seed_falls_back_to_the_environment():
    assert cli.resolve("gen-data", {"out": "x"}, None, env={"PHYLAA_SEED": "7"})["seed"] == 7
    assert cli.resolve("gen-data", {"out": "x"}, "seed = 3", env={"PHYLAA_SEED": "7"})["seed"] == 3
    assert cli.resolve("gen-data", {"out": "x", "seed": 5}, "seed = 3", env={"PHYLAA_SEED": "7"})["seed"] == 5


@pytest.mark.parametrize("text", ["colour = red", "n: 4", "n = four", "branch = cnn"])
def test_bad_config_files_are_rejected(text):
    with pytest.raises(cli.ConfigError):
        cli.resolve("train" if "branch" in text else "gen-data", {"out": "x", "corpus": "c"}, text, env={})


def test_missing_required_and_bad_threads():
    with pytest.raises(cli.ConfigError, match="--out"):
        cli.resolve("gen-data", {}, None, env={})
    with pytest.raises(cli.ConfigError):
        cli.resolve("gen-data", {"out": "x", "threads": 0}, None, env={})


def test_format_round_trips_through_the_parser():
    cfg = cli.resolve("train", {"corpus": "c", "out": "o", "drop_conditioner": ["flow", "spec"]}, None, env={})
    again = cli.resolve("train", {}, cli.format_config("train", cfg), env={})
    assert again == cfg


def test_unknown_key_in_a_config_file_exits_nonzero(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("out = x\nbogus = 1\n")
    assert run("gen-data", "--config", cfg) == 1
    assert not (tmp_path / "x").exists()


def test_missing_inputs_exit_nonzero(tmp_path):
    assert run("eval", "--corpus", tmp_path, "--checkpoint", tmp_path / "no.phya", "--out", tmp_path / "o") == 1
    assert run("extract", "--clip", tmp_path / "none.phyt", "--out", tmp_path / "p.phyt") == 1


# -- byte-identical reruns and replay --------------------------------------------

def test_gen_data_rerun_and_replay(tmp_path):
    out = tmp_path / "c"
    a, b = twice(out, ["gen-data", "--out", out, "--n", 20, "--t", 8, "--hw", 16, "--seed", 4])
    assert a == b
    assert "seed = 4" in a["config.txt"].decode()
    # the echoed config alone reproduces the corpus elsewhere
    shutil.copy(out / "config.txt", tmp_path / "replay.txt")
    assert run("gen-data", "--config", tmp_path / "replay.txt", "--out", tmp_path / "r") == 0
    assert snapshot(tmp_path / "r", skip={"config.txt"}) == snapshot(out, skip={"config.txt"})


def test_extract_rerun(clip_file, tmp_path):
    path, frames, _ = clip_file
    out = tmp_path / "p.phyt"
    argv = ["extract", "--clip", path, "--out", out, "--roi", "cheek=0.1,0.4,0.5,0.8"]
    assert run(*argv) == 0
    first = out.read_bytes()
    assert run(*argv) == 0
    assert out.read_bytes() == first
    vol = phyt.load(out)
    assert vol.shape == (frames.shape[0], 6, *frames.shape[1:3])
    echoed = (tmp_path / "p.phyt.config.txt").read_text()
    assert "roi = cheek=0.1,0.4,0.5,0.8" in echoed


def test_extract_rejects_malformed_roi(clip_file, tmp_path):
    assert run("extract", "--clip", clip_file[0], "--out", tmp_path / "p.phyt", "--roi", "cheek=0.1,0.2") == 1


def test_train_rerun_and_replay(tiny_corpus, ckpt, tmp_path):
    # the checkpoint records its file stem as the branch name, so reruns keep the stem
    out = tmp_path / "a" / ckpt[0].name
    argv = ["train", "--corpus", tiny_corpus, "--out", out, "--branch", "recurrent", *TRAIN]
    assert run(*argv) == 0
    assert out.read_bytes() == ckpt[0].read_bytes()
    history = ".history.csv"
    assert Path(str(out) + history).read_bytes() == Path(str(ckpt[0]) + history).read_bytes()
    replay = tmp_path / "b" / ckpt[0].name
    assert run("train", "--config", str(out) + ".config.txt", "--out", replay) == 0
    assert replay.read_bytes() == out.read_bytes()


def test_eval_rerun_and_metrics_schema(tiny_corpus, ckpt, tmp_path):
    out = tmp_path / "e"
    argv = ["eval", "--corpus", tiny_corpus, "--out", out, "--mc-samples", 4,
            *(x for p in ckpt for x in ("--checkpoint", p))]
    a, b = twice(out, argv)
    assert a == b
    rows = list(csv.reader(a["metrics.csv"].decode().splitlines()))
    assert rows[0] == ["metric", "branch", "value", "seed"]
    assert {r[1] for r in rows[1:]} == {"recurrent-on", "causal-conv-off", "ensemble"}
    assert {r[3] for r in rows[1:]} == {"0"}


def test_eval_is_independent_of_worker_count(tiny_corpus, ckpt, tmp_path):
    base = ["eval", "--corpus", tiny_corpus, "--checkpoint", ckpt[0]]
    assert run(*base, "--out", tmp_path / "one") == 0
    assert run(*base, "--out", tmp_path / "two", "--threads", 2) == 0
    for name in ("metrics.csv", "scores.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


@pytest.mark.parametrize("kind", ["fgsm", "pgd"])
def test_attack_rerun(tiny_corpus, ckpt, tmp_path, kind):
    out = tmp_path / "a"
    argv = ["attack", "--corpus", tiny_corpus, "--checkpoint", ckpt[0], "--out", out, "--kind", kind,
            "--iters", 2, "--limit", 3]
    a, b = twice(out, argv)
    assert a == b
    rows = list(csv.reader(a["attack.csv"].decode().splitlines()))
    assert rows[0] == ["clip", "label", "clean_score", "adv_score"] and len(rows) == 4


def test_transfer_attack_needs_a_surrogate(tiny_corpus, ckpt, tmp_path):
    base = ["attack", "--corpus", tiny_corpus, "--checkpoint", ckpt[0], "--kind", "transfer", "--iters", 1,
            "--limit", 2]
    assert run(*base, "--out", tmp_path / "x") == 1
    assert run(*base, "--out", tmp_path / "y", "--surrogate", ckpt[1]) == 0


def test_certify_rerun(tiny_corpus, ckpt, tmp_path):
    out = tmp_path / "c"
    a, b = twice(out, ["certify", "--corpus", tiny_corpus, "--checkpoint", ckpt[1], "--out", out,
                       "--k", 20, "--limit", 2, "--seed", 2])
    assert a == b
    rows = list(csv.DictReader(a["certify.csv"].decode().splitlines()))
    assert len(rows) == 2
    for r in rows:
        assert (float(r["radius"]) == 0.0) == (r["abstain"] == "1")


def test_explain_outputs(ckpt, clip_file, tmp_path):
    path, frames, _ = clip_file
    out = tmp_path / "x"
    a, b = twice(out, ["explain", "--checkpoint", ckpt[0], "--clip", path, "--out", out])
    assert a == b
    t, h, w, _ = frames.shape
    for name in ("m_phy.pgm", "saliency.pgm"):
        assert read_pgm(out / name).shape == (h, w)
    curve = list(csv.DictReader((out / "frame_importance.csv").read_text().splitlines()))
    assert [int(r["frame"]) for r in curve] == list(range(t))
    assert sum(float(r["weight"]) for r in curve) == pytest.approx(1.0, abs=1e-6)


def test_ablate_rejects_bad_seed_list(tiny_corpus, tmp_path):
    assert run("ablate", "--corpus", tiny_corpus, "--out", tmp_path / "a", "--seeds", "0,x", "--no-pgd") == 1


def test_parallel_map_preserves_order():
    assert cli.parallel_map(np.square, range(9), 3) == [x * x for x in range(9)]
