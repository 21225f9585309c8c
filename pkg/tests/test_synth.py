import hashlib
from pathlib import Path

import numpy as np
import pytest

from crossground.geometry import axis_align
from crossground.groundnet.proposals import STRUCTURAL
from crossground.scenedata import save_corpus
from crossground.synth import (
    NEUTRAL_SHIFT,
    ShiftConfig,
    SynthConfig,
    SynthError,
    apply_random_pose,
    generate_synthetic,
)


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_byte_identical(tmp_path, small_config):
    for run in ("a", "b"):
        src, tgt = generate_synthetic(small_config, ShiftConfig.strong(), seed=7)
        save_corpus(src, tmp_path / run / "src")
        save_corpus(tgt, tmp_path / run / "tgt")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    src8, _ = generate_synthetic(small_config, ShiftConfig.strong(), seed=8)
    save_corpus(src8, tmp_path / "c" / "src")
    assert tree_hash(tmp_path / "a" / "src") != tree_hash(tmp_path / "c" / "src")


def _objects(corpus):
    for split in corpus.splits.values():
        for scene in split.scenes.values():
            for inst in scene.instances:
                if inst.object_name not in STRUCTURAL:
                    yield inst


def test_dropout_removes_class(small_pair):
    src, tgt = small_pair
    assert not any(i.object_name == "plant" for i in _objects(tgt))
    assert all(e.object_name != "plant" for s in tgt.splits.values() for e in s.expressions)


def test_density_scale():
    cfg = SynthConfig(n_scenes=20, n_frames=0, embedding_dim=8)
    src, tgt = generate_synthetic(cfg, ShiftConfig(point_density_scale=0.25), seed=0)
    a = [i.n_points for i in _objects(src)]
    b = [i.n_points for i in _objects(tgt)]
    assert len(a) >= 100 and len(b) >= 100
    ratio = np.mean(b) / np.mean(a)
    assert abs(ratio - 0.25) <= 0.025


def test_corpus_structure(small_pair, small_config):
    for corpus in small_pair:
        total = sum(len(s.scenes) for s in corpus.splits.values())
        assert total == small_config.n_scenes
        for split in corpus.splits.values():
            per_object = {}
            for e in split.expressions:
                per_object[(e.scene_id, e.object_id)] = per_object.get((e.scene_id, e.object_id), 0) + 1
            assert per_object and min(per_object.values()) >= 2
            for scene in split.scenes.values():
                walls = [i for i in scene.instances if i.object_name == "wall"]
                assert len(walls) == 4 and any(i.object_name == "floor" for i in scene.instances)
                assert len(scene.frames) == small_config.n_frames
                for f in scene.frames:
                    assert f.embedding_key in scene.embeddings
        assert len(corpus["val"].expressions) > 0


def test_scenes_are_generated_aligned(small_source):
    r = np.random.default_rng(0)
    for scene in list(small_source["train"].scenes.values())[:4]:
        t, _ = axis_align(scene)
        assert np.allclose(t.as_matrix(), np.eye(4), atol=1e-6)
        pose, moved = apply_random_pose(scene, r)
        t, _ = axis_align(moved)
        assert np.allclose((t @ pose).as_matrix(), np.eye(4), atol=1e-6)


def test_templates_differ_under_shift(small_pair):
    src, tgt = small_pair
    vocab = lambda c: {t for s in c.splits.values() for e in s.expressions for t in e.tokens}
    assert vocab(tgt) - vocab(src)
    mean_len = lambda c: np.mean([len(e.tokens) for s in c.splits.values() for e in s.expressions])
    assert mean_len(tgt) < mean_len(src)


def test_invalid_configs():
    with pytest.raises(SynthError):
        generate_synthetic(SynthConfig(n_scenes=0), NEUTRAL_SHIFT, 0)
    with pytest.raises(SynthError):
        generate_synthetic(SynthConfig(descs_per_object=(1, 2)), NEUTRAL_SHIFT, 0)
    with pytest.raises(SynthError):
        generate_synthetic(SynthConfig(), ShiftConfig(point_density_scale=0), 0)
    with pytest.raises(SynthError):
        generate_synthetic(SynthConfig(), ShiftConfig(dropout_classes=("unicorn",)), 0)
    with pytest.raises(SynthError):
        generate_synthetic(SynthConfig(), ShiftConfig(template_set="nope"), 0)
