import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfx3d.data import (
    CLASSES,
    UNK,
    VOCAB,
    ParseError,
    Scene,
    SceneConfig,
    SceneObject,
    generate_dataset,
    generate_queries,
    generate_scene,
    ingest_external_features,
    read_dataset,
    read_scene,
    read_text_embeddings,
    strip_semantic,
    target_object,
    text_onehot,
    tokenize,
    write_dataset,
    write_features,
    write_pointcloud,
    write_scene,
    write_text_embeddings,
)
from rfx3d.geom import Box3, FeaturizedPointCloud, iou3


def hand_scene(specs):
    """Scene from (class, color, center_xy) triples; points are box corners."""
    objects, coords, labels = [], [], []
    for k, (cls, color, (x, y)) in enumerate(specs):
        box = Box3((x, y, 0.25), (0.4, 0.4, 0.5))
        objects.append(SceneObject(cls, color, box))
        corners = np.array([[i, j, l] for i in (0, 1) for j in (0, 1) for l in (0, 1)], float)
        coords.append(box.lo + corners * np.array(box.size))
        labels.append(np.full(8, k))
    c = np.concatenate(coords)
    return Scene(objects, FeaturizedPointCloud(c, np.zeros((len(c), 2))), np.concatenate(labels))


# --- tokenize ---------------------------------------------------------------------

def test_tokenize_cases():
    assert len(tokenize("red chair")) == 2
    assert tokenize("") == []
    assert tokenize("RED chair") == tokenize("red chair")
    assert tokenize("zebra") == [VOCAB[UNK]]
    assert 30 <= len(VOCAB) <= 45


def test_text_onehot_shape():
    oh = text_onehot(tokenize("the red chair"))
    assert oh.shape == (8 * len(VOCAB),)
    assert oh.sum() == 3


# --- generation --------------------------------------------------------------------

def test_single_object_scene():
    cfg = SceneConfig(n_objects=(1, 1))
    scene = generate_scene(cfg, np.random.default_rng(0))
    assert len(scene.objects) == 1
    with pytest.raises(ValueError):
        SceneConfig(n_objects=(0, 2))
    with pytest.raises(ValueError):
        SceneConfig(noise=-0.1)


def test_noise_free_objects_share_semantics():
    cfg = SceneConfig(noise=0.0, invalid_frac=0.0)
    scene = generate_scene(cfg, np.random.default_rng(1))
    k = len(CLASSES)
    for i in range(len(scene.objects)):
        f = scene.pc.feats[scene.labels == i, :k]
        assert np.all(f == f[0])
        assert f[0, CLASSES.index(scene.objects[i].cls)] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_scene_boxes_disjoint(seed):
    scene = generate_scene(SceneConfig(points_per_object=(20, 40)), np.random.default_rng(seed))
    n = len(scene.objects)
    for i in range(n):
        for j in range(i + 1, n):
            assert iou3(scene.objects[i].box, scene.objects[j].box) == 0.0


def test_placement_failure_is_rejected():
    cfg = SceneConfig(room=(1.0, 1.0), n_objects=(6, 6), footprint=(0.8, 0.9))
    with pytest.raises(RuntimeError):
        generate_scene(cfg, np.random.default_rng(0))


def test_attribute_query_for_unique_object():
    scene = hand_scene([("chair", "red", (0.5, 0.5)), ("table", "blue", (3.0, 3.0))])
    qs = [q for q in generate_queries(scene) if q.template == "attribute"]
    red = [q for q in qs if q.text == "the red chair"]
    assert len(red) == 1
    assert target_object(scene, red[0]) == 0
    assert len(red[0].query_tokens) == 3


def test_identical_objects_rejected_without_relations():
    scene = hand_scene([("chair", "red", (0.5, 0.5)), ("chair", "red", (3.0, 3.0))])
    assert generate_queries(scene) == []


def test_nearest_resolves_by_center_distance():
    scene = hand_scene([("chair", "red", (0.5, 0.5)), ("chair", "red", (3.5, 3.5)), ("table", "blue", (1.2, 0.8))])
    qs = [q for q in generate_queries(scene) if q.template == "nearest"]
    assert [q.text for q in qs] == ["the chair closest to the table"]
    centers = scene.centers()
    d = np.linalg.norm(centers[[0, 1]] - centers[2], axis=1)
    assert target_object(scene, qs[0]) == int(np.argmin(d))
    assert qs[0].target_span == (1, 2)
    assert len(qs[0].anchors) == 1 and qs[0].anchors[0].span == (5, 6)


@pytest.mark.parametrize("seed", range(5))
def test_relational_queries_match_bruteforce(seed):
    scenes, samples = generate_dataset(SceneConfig(points_per_object=(20, 40)), 6, 6, seed=seed)
    by_id = {s.scene_id: s for s in scenes}
    for q in samples:
        scene = by_id[q.scene_id]
        words = q.text.split()
        centers = scene.centers()
        if q.template == "attribute":
            continue
        cands = [k for k, o in enumerate(scene.objects) if o.cls == words[1]]
        if q.template == "nearest":
            anchor = [k for k, o in enumerate(scene.objects) if o.cls == words[-1]]
            point = centers[anchor[0]]
        else:
            a = [k for k, o in enumerate(scene.objects) if o.cls == words[4]]
            b = [k for k, o in enumerate(scene.objects) if o.cls == words[7]]
            point = (centers[a[0]] + centers[b[0]]) / 2
        best = min(cands, key=lambda k: np.linalg.norm(centers[k] - point))
        assert target_object(scene, q) == best


def test_generation_is_deterministic():
    cfg = SceneConfig(points_per_object=(20, 40))
    _, a = generate_dataset(cfg, 4, seed=3)
    _, b = generate_dataset(cfg, 4, seed=3)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.text == y.text
        assert np.array_equal(x.pc.coords, y.pc.coords) and np.array_equal(x.pc.feats, y.pc.feats)
        assert np.array_equal(x.gt_mask, y.gt_mask)


def test_scene_prefix_is_stable():
    cfg = SceneConfig(points_per_object=(20, 40))
    s4, _ = generate_dataset(cfg, 4, seed=1)
    s2, _ = generate_dataset(cfg, 2, seed=1)
    for x, y in zip(s2, s4):
        assert np.array_equal(x.pc.coords, y.pc.coords)


def test_generated_samples_satisfy_invariants():
    _, samples = generate_dataset(SceneConfig(points_per_object=(20, 40)), 8, 3, seed=0)
    assert {s.template for s in samples} >= {"attribute", "nearest"}
    for s in samples:
        assert s.gt_mask.any()
        assert np.all(s.gt_box.contains(s.pc.coords[s.gt_mask]))
        assert 0 <= s.target_span[0] < s.target_span[1] <= len(s.query_tokens)


def test_rgb_features_drop_semantics():
    cfg = SceneConfig(points_per_object=(20, 40), features="rgb")
    scene = generate_scene(cfg, np.random.default_rng(0))
    assert scene.pc.dim == cfg.feature_dim == 3 + 3 * 2 * cfg.octaves
    assert scene.pc.valid.all()
    sem = generate_scene(SceneConfig(points_per_object=(20, 40)), np.random.default_rng(0))
    np.testing.assert_array_equal(strip_semantic(sem.pc).feats, scene.pc.feats)


# --- files ---------------------------------------------------------------------------

def sample_with_anchors():
    _, samples = generate_dataset(SceneConfig(points_per_object=(20, 40)), 4, 3, seed=0)
    return next(s for s in samples if s.anchors)


def test_scene_roundtrip_is_bit_identical(tmp_path):
    s = sample_with_anchors()
    p = tmp_path / "s.rfxs"
    write_scene(s, p)
    assert p.read_bytes().startswith(b"RFXSCN1\n")
    r = read_scene(p)
    assert r.pc.coords.tobytes() == s.pc.coords.tobytes()
    assert r.pc.feats.tobytes() == s.pc.feats.tobytes()
    assert np.array_equal(r.pc.valid, s.pc.valid) and np.array_equal(r.gt_mask, s.gt_mask)
    assert r.gt_box.as_array().tobytes() == s.gt_box.as_array().tobytes()
    assert (r.query_tokens, r.target_span, r.text, r.template) == (s.query_tokens, s.target_span, s.text, s.template)
    assert len(r.anchors) == len(s.anchors)
    for a, b in zip(r.anchors, s.anchors):
        assert np.array_equal(a.mask, b.mask) and a.span == b.span
    p2 = tmp_path / "s2.rfxs"
    write_scene(r, p2)
    assert p2.read_bytes() == p.read_bytes()


def test_truncated_and_versioned_files_rejected(tmp_path):
    s = sample_with_anchors()
    p = tmp_path / "s.rfxs"
    write_scene(s, p)
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(ParseError, match="offset"):
        read_scene(p)
    p.write_bytes(data.replace(b"RFXSCN1", b"RFXSCN7", 1))
    with pytest.raises(ParseError, match="version"):
        read_scene(p)
    p.write_bytes(data[:10])
    with pytest.raises(ParseError):
        read_scene(p)


def test_dataset_directory_roundtrip(tmp_path):
    _, samples = generate_dataset(SceneConfig(points_per_object=(20, 40)), 3, seed=0)
    write_dataset(samples, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert [s.text for s in back] == [s.text for s in samples]
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "empty")


def test_external_features(tmp_path):
    rng = np.random.default_rng(0)
    coords = rng.uniform(0, 2, (10, 3))
    rgb = rng.random((10, 3)).astype(np.float32)
    write_pointcloud(coords, tmp_path / "pc.txt")
    write_features(rgb, None, tmp_path / "f.bin")
    pc = ingest_external_features(tmp_path / "pc.txt", tmp_path / "f.bin")
    assert pc.dim == 3 and pc.valid.all()
    np.testing.assert_array_equal(pc.feats, rgb.astype(np.float64))
    np.testing.assert_allclose(pc.coords, coords, rtol=1e-8)
    write_features(rgb, np.zeros(10, bool), tmp_path / "g.bin")
    assert not ingest_external_features(tmp_path / "pc.txt", tmp_path / "g.bin").valid.any()
    write_features(rgb[:7], None, tmp_path / "h.bin")
    with pytest.raises(ValueError, match="10.*7"):
        ingest_external_features(tmp_path / "pc.txt", tmp_path / "h.bin")


def test_text_embedding_file(tmp_path):
    emb = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_text_embeddings(emb, tmp_path / "t.bin")
    np.testing.assert_array_equal(read_text_embeddings(tmp_path / "t.bin"), emb)
