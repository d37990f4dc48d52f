import json
import re
from pathlib import Path

import pytest

from moralkit.cli import main
from moralkit.core import Detection
from moralkit.evaluation import detections_to_jsonl
from moralkit.scene import read_sequence
from moralkit.weights import load

TINY = """\
seed = 0

[simulate]
mode = "benchmark"

[encoder]
x_range = [0.0, 25.6]
y_range = [-12.8, 12.8]
feature_width = 16

[mre]
frames = 3

[mre.train]
epochs = 2

[detector.train]
epochs = 2

[benchmark]
n_train = 3
n_test = 2
mos_sequences = 2
mos_test_sequences = 1
mos_frames = 5
test_frames = 5
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert run("simulate", "--config", cfg, "--out", root / "data") == 0
    assert run("train", root / "data", "--stage", "mos", "--config", cfg, "--out", root / "mos") == 0
    assert run("train", root / "data", "--stage", "detector", "--config", cfg, "--mos", root / "mos" / "mos.mkwt",
               "--out", root / "det") == 0
    return root


def _sha(capsys):
    return re.search(r"manifest sha256 ([0-9a-f]{64})", capsys.readouterr().out).group(1)


def test_simulate_layout(work):
    manifest = json.loads((work / "data" / "manifest.json").read_text())
    counts = {}
    for e in manifest["sequences"]:
        counts[e["path"].split("/")[0]] = counts.get(e["path"].split("/")[0], 0) + 1
        assert (work / "data" / e["path"] / "sequence.json").exists()
    assert counts == {"train": 3, "test": 2, "mos-train": 2, "mos-test": 1}
    assert read_sequence(work / "data" / "test" / "test000").config.n_frames == 5


def test_simulate_is_reproducible(work, tmp_path, capsys):
    cfg = work / "tiny.toml"
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    first = _sha(capsys)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b") == 0
    assert _sha(capsys) == first
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (work / "data" / "manifest.json").read_bytes()
    assert run("simulate", "--config", cfg, "--seed", 1, "--out", tmp_path / "c") == 0
    assert _sha(capsys) != first


def test_single_scene_mode(tmp_path):
    assert run("simulate", "--out", tmp_path) == 0
    seq = read_sequence(tmp_path)
    assert len(seq) == 5


def test_bad_tau_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[mre]\ntau = -1.0\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == 2
    assert "mre.tau" in capsys.readouterr().err


def test_missing_data_exits_1(tmp_path, capsys):
    assert run("eval", tmp_path / "nothing", "--detections", tmp_path / "x.jsonl", "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_mos_outputs(work):
    metrics = json.loads((work / "mos" / "mos_metrics.json").read_text())
    assert metrics["split"] == "held-out"
    assert 0.0 <= metrics["mos"]["moving_iou"] <= 1.0
    rows = (work / "mos" / "mos_loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 3
    _, meta = load(work / "mos" / "mos.mkwt")
    assert meta["kind"] == "mos" and meta["epoch"] == 2


def test_zero_epochs_returns_initial_weights(work, tmp_path):
    cfg = work / "tiny.toml"
    for out in ("a", "b"):
        assert run("train", work / "data", "--stage", "mos", "--config", cfg, "--epochs", 0,
                   "--out", tmp_path / out) == 0
    a, _ = load(tmp_path / "a" / "mos.mkwt")
    b, _ = load(work / "mos" / "mos.mkwt")
    from moralkit.config import load_config
    from moralkit.mre.pointnet import build_mos
    from moralkit.pipeline import sub_seed
    c = load_config(cfg)
    init = build_mos(c.mre.network, seed=sub_seed(c.seed, "mos-init")).state_dict()
    assert all((a["mos/" + k] == v.numpy()).all() for k, v in init.items())
    assert any((a[k] != b[k]).any() for k in a)


@pytest.mark.parametrize("stage", ["mos", "detector"])
def test_resume_is_bit_exact(work, tmp_path, stage):
    cfg = work / "tiny.toml"
    extra = [] if stage == "mos" else ["--mos", work / "mos" / "mos.mkwt"]
    name = "mos" if stage == "mos" else "detector"
    assert run("train", work / "data", "--stage", stage, "--config", cfg, "--epochs", 2, "--stop-after", 1,
               "--out", tmp_path, *extra) == 0
    assert run("train", work / "data", "--stage", stage, "--config", cfg, "--epochs", 2,
               "--resume", tmp_path / f"{name}_ckpt.mkwt", "--out", tmp_path, *extra) == 0
    reference = work / ("mos" if stage == "mos" else "det") / f"{name}.mkwt"
    assert (tmp_path / f"{name}.mkwt").read_bytes() == reference.read_bytes()
    assert (tmp_path / f"{name}_loss.csv").read_bytes() == reference.with_name(f"{name}_loss.csv").read_bytes()


def _eval(work, out, *extra):
    assert run("eval", work / "data", "--config", work / "tiny.toml", "--out", out, *extra) == 0
    return json.loads((out / "report.json").read_text())


def test_eval_live_and_stored_agree(work, tmp_path):
    live = _eval(work, tmp_path / "live", "--weights", work / "det" / "detector.mkwt")
    stored = _eval(work, tmp_path / "stored", "--detections", tmp_path / "live" / "detections.jsonl")
    assert (tmp_path / "live" / "report.json").read_bytes() == (tmp_path / "stored" / "report.json").read_bytes()
    assert live["frames"] == 2 * 3      # K = 3 leaves frames 2..4 of each 5-frame test sequence
    assert stored == live


def test_eval_oracle_and_empty_detections(work, tmp_path):
    dets = []
    for d in sorted((work / "data" / "test").iterdir()):
        seq = read_sequence(d)
        for t in range(2, len(seq)):
            dets += [Detection(b, 1.0, f"{seq.name}/{seq[t].frame_id}") for b in seq[t].boxes]
    (tmp_path / "gt.jsonl").write_text(detections_to_jsonl(dets))
    (tmp_path / "empty.jsonl").write_text("")
    perfect = _eval(work, tmp_path / "p", "--detections", tmp_path / "gt.jsonl")["ap"]["EntireArea"]
    assert all(v == 1.0 for v in perfect.values() if v is not None)
    empty = _eval(work, tmp_path / "e", "--detections", tmp_path / "empty.jsonl")["ap"]["EntireArea"]
    assert empty["mAP"] == 0.0


def test_eval_rejects_mos_container(work, tmp_path):
    assert run("eval", work / "data", "--config", work / "tiny.toml", "--weights", work / "mos" / "mos.mkwt",
               "--out", tmp_path) == 1


def test_plot_is_deterministic(work, tmp_path):
    seq_dir = work / "data" / "test"
    for out in ("a", "b"):
        assert run("plot", seq_dir, "--config", work / "tiny.toml", "--out", tmp_path / out) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert any("_frame_" in f for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_plot_empty_frame(tmp_path):
    empty = tmp_path / "empty.toml"
    empty.write_text('[simulate]\npreset = "custom"\n[scene]\nclutter_rate = 0\nlidar_ground_points = 0\n')
    assert run("simulate", "--config", empty, "--out", tmp_path / "seq") == 0
    assert run("plot", tmp_path / "seq", "--config", empty, "--out", tmp_path / "svg") == 0
    svgs = list(Path(tmp_path / "svg").glob("*.svg"))
    assert len(svgs) == 1
    text = svgs[0].read_text()
    assert "<circle" not in text and "<polygon" not in text and "x [m]" in text
