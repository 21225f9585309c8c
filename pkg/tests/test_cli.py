import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from crossground.cli import main
from crossground.geometry import Aabb, Instance, PointCloud, RigidTransform
from crossground.scenedata import Scene, load_scene, save_scene
from crossground.synth import SynthConfig, apply_random_pose, make_scene

CONFIG = """\
seed: 0
model: {c: 64, d: 16, m: 16, n_heads: 2, n_layers: 1, ffn_dim: 16}
embedding: {dim: 64}
synth: {embedding_dim: 64, n_scenes: 8, n_objects: [3, 5], n_frames: 8}
train: {epochs: 2}
"""


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Shared synth + train artifacts for the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    cfg.write_text(CONFIG)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--source", str(root / "data/source"), "--ckpt", str(root / "m.ckpt")]) == 0
    return root


# -- align ------------------------------------------------------------------------------

def _rooms(n, seed=0):
    cfg = SynthConfig(n_objects=(3, 4), n_frames=4, embedding_dim=8)
    rng = np.random.default_rng(seed)
    return [make_scene(rng, cfg, f"room{i:02d}")[0] for i in range(n)]


def test_align_identity(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rooms = _rooms(2)
    for s in rooms:
        save_scene(s, src / f"{s.scene_id}.json")
    assert main(["align", "--in", str(src), "--out", str(tmp_path / "out")]) == 0
    for s in rooms:
        got = load_scene(tmp_path / "out" / f"{s.scene_id}.json")
        assert np.allclose(got.cloud.positions, s.cloud.positions, atol=1e-6)
    lines = (tmp_path / "out/transforms.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        assert np.allclose(json.loads(line)["matrix"], np.eye(4), atol=1e-6)


def test_align_recovers_generator_poses(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(11)
    poses = {}
    for s in _rooms(3, seed=1):
        pose, moved = apply_random_pose(s, rng)
        poses[s.scene_id] = pose
        save_scene(moved, src / f"{s.scene_id}.json")
    assert main(["align", "--in", str(src), "--out", str(tmp_path / "out")]) == 0
    for line in (tmp_path / "out/transforms.jsonl").read_text().splitlines():
        rec = json.loads(line)
        pose = poses[rec["scene_id"]]
        assert np.allclose(rec["matrix"], pose.inverse().as_matrix(), atol=1e-6)
        assert abs(rec["yaw_deg"] + math.degrees(pose.yaw)) <= 1e-6


def test_align_reports_unalignable_scene(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    save_scene(_rooms(1)[0], src / "good.json")
    pts = np.random.default_rng(0).uniform(0, 1, (20, 3))
    bare = Scene("nowalls", PointCloud(pts), [Instance(1, "chair", Aabb.from_bounds(pts.min(0), pts.max(0)), (0, 20))])
    save_scene(bare, src / "nowalls.json")
    assert main(["align", "--in", str(src), "--out", str(tmp_path / "out")]) == 1
    assert "nowalls" in capsys.readouterr().err
    assert (tmp_path / "out/good.json").exists()


def test_align_corpus_layout(run, tmp_path):
    out = tmp_path / "aligned"
    assert main(["align", "--in", str(run / "data/source"), "--out", str(out)]) == 0
    assert (out / "corpus.json").exists() and (out / "train.jsonl").exists()
    assert main(["stats", "--dataset", str(out)]) == 0


def test_align_missing_input_is_usage_error(tmp_path):
    assert main(["align", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


# -- synth ------------------------------------------------------------------------------

def test_synth_deterministic_tree(run, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--config", str(run / "run.yaml"), "--out", str(again)]) == 0
    assert tree_hash(again) == tree_hash(run / "data")
    other = tmp_path / "other"
    assert main(["synth", "--config", str(run / "run.yaml"), "--seed", "1", "--out", str(other)]) == 0
    assert tree_hash(other) != tree_hash(run / "data")


def test_synth_outputs(run):
    for tag in ("source", "target"):
        assert (run / "data" / tag / "val.jsonl").read_text().strip()
        meta = json.loads((run / "data" / tag / "corpus.json").read_text())
        assert meta["config"]["run_config"]["seed"] == 0
    assert json.loads((run / "data/config.json").read_text())["model"]["c"] == 64


def test_synth_usage_errors(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["synth", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {colour: true}\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2


# -- train ------------------------------------------------------------------------------

def test_train_deterministic_checkpoint(run, tmp_path):
    ck = tmp_path / "again.ckpt"
    assert main(["train", "--config", str(run / "run.yaml"), "--source", str(run / "data/source"), "--ckpt", str(ck)]) == 0
    assert ck.read_bytes() == (run / "m.ckpt").read_bytes()
    assert (tmp_path / "again.ckpt.loss.csv").read_bytes() == (run / "m.ckpt.loss.csv").read_bytes()


def test_train_nan_abort_exits_1(run, tmp_path, capsys):
    ck = tmp_path / "nan.ckpt"
    code = main(["train", "--config", str(run / "run.yaml"), "--set", "train.lr=1e30",
                 "--source", str(run / "data/source"), "--ckpt", str(ck)])
    assert code == 1
    assert "non-finite" in capsys.readouterr().err
    assert not ck.exists()


def test_train_loss_log_smoke(run):
    rows = (run / "m.ckpt.loss.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert "total" in header
    totals = [float(r.split(",")[header.index("total")]) for r in rows[1:]]
    assert all(math.isfinite(v) for v in totals)


# -- eval -------------------------------------------------------------------------------

def _eval(run, out, *extra):
    return main(["eval", "--ckpt", str(run / "m.ckpt"), "--target", str(run / "data/target"), "--report", str(out), *extra])


def test_eval_model_report(run, tmp_path):
    out = tmp_path / "r.json"
    assert _eval(run, out) == 0
    rep = json.loads(out.read_text())
    assert rep["meta"]["method"] == "model" and rep["meta"]["config"]["seed"] == 0
    assert set(rep["accuracy"]) == {"unique", "multiple", "overall"}
    assert (tmp_path / "r.json.txt").exists() and (tmp_path / "r.json.predictions.jsonl").exists()
    again = tmp_path / "r2.json"
    assert _eval(run, again) == 0
    assert again.read_bytes() == out.read_bytes()


def test_eval_objdetbest_bound_asserted(run, tmp_path, capsys):
    assert _eval(run, tmp_path / "b.json", "--baseline", "objdetbest") == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("upper bound")]
    assert len(lines) == 2 and all(l.endswith(": ok") for l in lines)


@pytest.mark.parametrize("baseline", ["random", "objoracle"])
def test_eval_other_baselines(run, tmp_path, baseline):
    assert _eval(run, tmp_path / "b.json", "--baseline", baseline) == 0


def test_eval_usage_errors(run, tmp_path):
    assert _eval(run, tmp_path / "x.json", "--baseline", "oracle") == 2
    assert _eval(run, tmp_path / "x.json", "--set", "model.m=8") == 2
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--target", str(run / "data/target"),
                 "--report", str(tmp_path / "x.json")]) == 1


# -- stats ------------------------------------------------------------------------------

def test_stats_counts_and_formats(run, capsys):
    assert main(["stats", "--dataset", str(run / "data/source"), "--format", "json"]) == 0
    first = capsys.readouterr().out
    assert main(["stats", "--dataset", str(run / "data/source"), "--format", "json"]) == 0
    assert capsys.readouterr().out == first
    stats = json.loads(first)["stats"]
    n_val = len((run / "data/source/val.jsonl").read_text().splitlines())
    assert stats["val"]["n_descriptions"] == n_val
    assert stats["all"]["n_descriptions"] == sum(stats[s]["n_descriptions"] for s in ("train", "val", "test"))
    assert main(["stats", "--dataset", str(run / "data/source")]) == 0
    text = capsys.readouterr().out
    assert main(["stats", "--dataset", str(run / "data/source")]) == 0
    assert capsys.readouterr().out == text
    assert text.startswith("dataset synthetic-source")


def test_stats_empty_dataset(tmp_path, capsys):
    root = tmp_path / "empty"
    (root / "scenes").mkdir(parents=True)
    for s in ("train", "val", "test"):
        (root / f"{s}.jsonl").write_text("")
    assert main(["stats", "--dataset", str(root), "--format", "json"]) == 0
    stats = json.loads(capsys.readouterr().out)["stats"]
    assert all(v == 0 for v in stats["all"].values())


def test_stats_missing_dataset(tmp_path):
    assert main(["stats", "--dataset", str(tmp_path / "nope")]) == 2


def test_identity_transform_record():
    # yaw of the logged matrix agrees with the stored degrees
    t = RigidTransform.from_yaw(math.radians(12.5))
    assert math.degrees(t.yaw) == pytest.approx(12.5)
