import json

import numpy as np
import pytest

from crossground import container
from crossground.geometry import Aabb, Instance, PointCloud, RigidTransform
from crossground.scenedata import (
    MULTIPLE,
    UNIQUE,
    CameraFrame,
    DataError,
    Dataset,
    ReferExpression,
    Scene,
    compute_stats,
    load_corpus,
    load_refer,
    load_scene,
    save_corpus,
    save_refer,
    save_scene,
    scene_descriptor,
    scene_tensors,
    tokenize,
    uniqueness_label,
)
from crossground.synth import SynthConfig, make_scene

from oracles import hand_stats


def _expr(scene_id, object_id, ann_id, tokens, name="chair"):
    return ReferExpression(scene_id, object_id, name, ann_id, " ".join(tokens), tuple(tokens))


def _minimal(tmp_path, pose=None):
    desc = {
        "scene_id": "s1",
        "instances": [{"object_id": 3, "object_name": "chair", "box": {"center": [0, 0, 0], "half_extents": [0, 0, 0]}, "point_range": [0, 1]}],
        "frames": [],
        "tensors": "s1.cg3d",
    }
    if pose is not None:
        desc["frames"] = [{"frame_id": "f0", "pose": pose, "embedding_key": "f0"}]
    container.save(tmp_path / "s1.cg3d", {"positions": np.zeros((1, 3))})
    (tmp_path / "s1.json").write_text(json.dumps(desc))
    return tmp_path / "s1.json"


def test_minimal_scene_loads(tmp_path):
    scene = load_scene(_minimal(tmp_path))
    assert scene.scene_id == "s1" and len(scene.cloud) == 1 and scene.instance(3).object_name == "chair"
    assert scene.frames == []


def test_improper_pose_rejected(tmp_path):
    pose = np.diag([1.0, 1.0, -1.0, 1.0]).reshape(-1).tolist()
    with pytest.raises(DataError, match="improper rotation"):
        load_scene(_minimal(tmp_path, pose))


def test_non_orthonormal_pose_rejected(tmp_path):
    pose = np.eye(4)
    pose[0, 1] = 1e-3
    with pytest.raises(DataError, match="s1"):
        load_scene(_minimal(tmp_path, pose.reshape(-1).tolist()))


def test_missing_tensor_and_duplicate_ids(tmp_path):
    path = _minimal(tmp_path)
    container.save(tmp_path / "s1.cg3d", {"colors": np.zeros((1, 3))})
    with pytest.raises(DataError, match="positions"):
        load_scene(path)
    container.save(tmp_path / "s1.cg3d", {"positions": np.zeros((2, 3))})
    desc = json.loads(path.read_text())
    desc["instances"].append(dict(desc["instances"][0]))
    path.write_text(json.dumps(desc))
    with pytest.raises(DataError, match="duplicate object_id"):
        load_scene(path)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scene_round_trip(tmp_path, seed):
    cfg = SynthConfig(n_objects=(3, 6), n_frames=6, embedding_dim=16)
    scene, _ = make_scene(np.random.default_rng(seed), cfg, f"scene{seed}")
    save_scene(scene, tmp_path / "a.json")
    back = load_scene(tmp_path / "a.json")
    before, after = scene_tensors(scene), scene_tensors(back)
    assert list(before) == list(after)
    for k in before:
        assert before[k].tobytes() == after[k].tobytes()
    canon = lambda s: json.dumps(scene_descriptor(s, "t"), sort_keys=True)
    assert canon(scene) == canon(back)
    # a second save is byte-identical
    save_scene(back, tmp_path / "b.json")
    assert (tmp_path / "a.cg3d").read_bytes() == (tmp_path / "b.cg3d").read_bytes()


def test_refer_examples(tmp_path):
    line = {"scene_id": "s1", "object_id": 3, "object_name": "chair", "ann_id": 0, "description": "the red chair", "token": ["the", "red", "chair"]}
    p = tmp_path / "r.jsonl"
    p.write_text(json.dumps(line) + "\n")
    (e,) = load_refer(p)
    assert e.key == ("s1", 3, 0) and e.tokens == ("the", "red", "chair") and e.description == "the red chair"
    p.write_text("")
    assert load_refer(p) == []
    p.write_text((json.dumps(line) + "\n") * 2)
    with pytest.raises(DataError, match="duplicate annotation id"):
        load_refer(p)


def test_refer_tokens_lowercased_and_fallback(tmp_path):
    p = tmp_path / "r.jsonl"
    recs = [
        {"scene_id": "s", "object_id": 1, "object_name": "lamp", "ann_id": 0, "description": "x", "token": ["The", "LAMP"]},
        {"scene_id": "s", "object_id": 1, "object_name": "lamp", "ann_id": 1, "description": "It's the lamp, by the bed."},
    ]
    p.write_text("".join(json.dumps(r) + "\n" for r in recs))
    a, b = load_refer(p)
    assert a.tokens == ("the", "lamp")
    assert b.tokens == ("it's", "the", "lamp", "by", "the", "bed")
    save_refer(tmp_path / "out.jsonl", [a, b])
    assert load_refer(tmp_path / "out.jsonl") == [a, b]


def test_tokenize():
    assert tokenize("The chair, next to 2 tables!") == ["the", "chair", "next", "to", "2", "tables"]


def _lamp_chair_scene():
    pts = np.zeros((4, 3))
    inst = [
        Instance(1, "lamp", Aabb((0, 0, 0), (1, 1, 1)), (0, 1)),
        Instance(2, "chair", Aabb((3, 0, 0), (1, 1, 1)), (1, 1)),
        Instance(3, "chair", Aabb((6, 0, 0), (1, 1, 1)), (2, 1)),
        Instance(4, "table", Aabb((9, 0, 0), (1, 1, 1)), (3, 1)),
    ]
    return Scene("room", PointCloud(pts), inst)


def test_dataset_referential_integrity():
    scene = _lamp_chair_scene()
    with pytest.raises(DataError, match="unknown scene"):
        Dataset("d", "train", {"room": scene}, [_expr("elsewhere", 1, 0, ["x"])])
    with pytest.raises(DataError, match="no object 9"):
        Dataset("d", "train", {"room": scene}, [_expr("room", 9, 0, ["x"])])
    with pytest.raises(DataError, match="split"):
        Dataset("d", "dev", {"room": scene}, [])


def test_uniqueness_examples():
    scene = _lamp_chair_scene()
    assert uniqueness_label(scene, _expr("room", 1, 0, ["lamp"], "lamp")) == UNIQUE
    assert uniqueness_label(scene, _expr("room", 2, 0, ["chair"])) == MULTIPLE
    with pytest.raises(DataError):
        uniqueness_label(scene, _expr("room", 9, 0, ["x"]))


def test_uniqueness_ten_expression_fixture():
    scene = _lamp_chair_scene()
    names = {1: "lamp", 2: "chair", 3: "chair", 4: "table"}
    targets = [1, 2, 3, 4, 2, 1, 3, 4, 4, 2]
    exprs = [_expr("room", oid, k, ["w"], names[oid]) for k, oid in enumerate(targets)]
    # hand count: lamp and table are alone, chairs come in a pair
    expected = [UNIQUE, MULTIPLE, MULTIPLE, UNIQUE, MULTIPLE, UNIQUE, MULTIPLE, UNIQUE, UNIQUE, MULTIPLE]
    assert [uniqueness_label(scene, e) for e in exprs] == expected


def test_stats_fixture():
    exprs = [_expr("a", 1, 0, ["red", "chair"]), _expr("a", 1, 1, ["the", "red", "chair"]), _expr("b", 2, 0, ["a", "big", "red", "lamp"])]
    s = compute_stats(exprs)
    assert s.n_descriptions == 3 and s.n_scans == 2 and s.n_objects == 2
    assert s.avg_desc_len == 3.0 and s.vocab_size == 6
    assert s.objects_per_scan == 1.0 and s.descs_per_object == 1.5
    ref = hand_stats(exprs)
    for k, v in ref.items():
        assert getattr(s, k) == v


def test_empty_stats_are_zero():
    s = compute_stats([])
    assert all(v == 0 for v in s.to_json().values())


def test_stats_match_recount_on_synthetic(small_source):
    for split in ("train", "val", "test"):
        ds = small_source[split]
        s = compute_stats(ds)
        for k, v in hand_stats(ds.expressions).items():
            assert getattr(s, k) == pytest.approx(v, abs=1e-12)


def test_corpus_round_trip(tmp_path, small_source):
    save_corpus(small_source, tmp_path / "c")
    back = load_corpus(tmp_path / "c", threads=3)
    assert back.name == small_source.name
    for split in ("train", "val", "test"):
        assert list(back[split].expressions) == list(small_source[split].expressions)
        assert sorted(back[split].scenes) == sorted(small_source[split].scenes)
    with pytest.raises(DataError, match="no split"):
        back["dev"]


def test_camera_frame_axes():
    pose = RigidTransform.from_yaw(0.0, (1, 2, 3))
    f = CameraFrame("f", pose, "k")
    assert np.array_equal(f.position, [1, 2, 3])
    assert np.array_equal(f.optical_axis, [0, 0, -1])
    with pytest.raises(DataError):
        CameraFrame("f", pose, "")
