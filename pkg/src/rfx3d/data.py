"""Synthetic rooms, templated referring expressions and on-disk formats.

Scenes are rooms of non-overlapping axis-aligned objects whose surfaces are
sampled, featurized and voxelized. Per-point features imitate lifted 2D
features: a class one-hot (the "semantic" slice), the color's RGB and its
harmonic encoding, plus gaussian noise. They say what a point is, never where
it sits relative to other objects.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import (
    Box3,
    FeaturizedPointCloud,
    VoxelGridSpec,
    harmonic_encode,
    iou3,
    voxelize,
)

CLASSES = (
    "chair", "table", "sofa", "lamp", "bed", "desk", "shelf", "cabinet",
    "stool", "plant", "box", "bin", "dresser", "bench", "crate", "ottoman",
)
COLORS = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.1, 0.2, 0.85),
    "yellow": (0.9, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.55, 0.15, 0.7),
    "brown": (0.45, 0.3, 0.15),
    "gray": (0.5, 0.5, 0.5),
}
FUNCTION_WORDS = ("the", "closest", "to", "between", "and")
UNK = "<unk>"
TEMPLATES = ("attribute", "nearest", "between")
RELATIONAL = ("nearest", "between")
SCENE_MAGIC = "RFXSCN"
SCENE_VERSION = 1


class ParseError(ValueError):
    pass


class Vocab:
    def __init__(self, words):
        self.words = list(words)
        if self.words[0] != UNK:
            raise ValueError("vocabulary must start with the UNK token")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate vocabulary word")

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.index.get(word, 0)


VOCAB = Vocab((UNK,) + FUNCTION_WORDS + tuple(COLORS) + CLASSES)


def tokenize(text: str, vocab: Vocab = VOCAB) -> list[int]:
    return [vocab[w] for w in text.lower().split()]


def text_onehot(tokens, vocab_size: int = len(VOCAB), max_len: int = 8) -> np.ndarray:
    """Position-slotted one-hot encoding of a token list (fixed width)."""
    out = np.zeros((max_len, vocab_size))
    for i, t in enumerate(list(tokens)[:max_len]):
        out[i, t] = 1.0
    return out.reshape(-1)


@dataclass
class SceneConfig:
    room: tuple[float, float] = (4.0, 4.0)
    n_objects: tuple[int, int] = (4, 7)
    classes: tuple[str, ...] = CLASSES
    colors: tuple[str, ...] = tuple(COLORS)
    classes_per_scene: int = 3
    points_per_object: tuple[int, int] = (300, 600)
    footprint: tuple[float, float] = (0.4, 0.9)
    height: tuple[float, float] = (0.4, 1.0)
    noise: float = 0.05
    invalid_frac: float = 0.05
    voxel_size: float = 0.1
    min_gap: float = 0.2
    cluster_prob: float = 0.5
    cluster_gap: tuple[float, float] = (0.2, 0.5)
    features: str = "semantic"
    octaves: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_objects[0] < 1 or self.n_objects[0] > self.n_objects[1]:
            raise ValueError("object count range must satisfy 1 <= lo <= hi")
        if self.points_per_object[0] < 1:
            raise ValueError("points per object must be >= 1")
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.features not in ("semantic", "rgb"):
            raise ValueError("features must be 'semantic' or 'rgb'")

    @property
    def semantic_dim(self) -> int:
        return len(self.classes) if self.features == "semantic" else 0

    @property
    def feature_dim(self) -> int:
        return self.semantic_dim + 3 + 3 * 2 * self.octaves


@dataclass
class SceneObject:
    cls: str
    color: str
    box: Box3


@dataclass
class Scene:
    objects: list[SceneObject]
    pc: FeaturizedPointCloud
    labels: np.ndarray  # object index per point
    scene_id: int = 0

    def object_mask(self, k: int) -> np.ndarray:
        return self.labels == k

    def object_box(self, k: int) -> Box3:
        p = self.pc.coords[self.labels == k]
        return Box3.from_bounds(p.min(axis=0), p.max(axis=0))

    def centers(self) -> np.ndarray:
        return np.array([self.object_box(k).center for k in range(len(self.objects))])


@dataclass
class GroundTruth:
    mask: np.ndarray
    box: Box3
    span: tuple[int, int]


@dataclass
class SceneSample:
    pc: FeaturizedPointCloud
    query_tokens: list[int]
    gt_mask: np.ndarray
    gt_box: Box3
    target_span: tuple[int, int]
    anchors: list[GroundTruth] = field(default_factory=list)
    text: str = ""
    template: str = ""
    scene_id: int = 0
    query_id: int = 0

    def __post_init__(self):
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        self.target_span = tuple(int(s) for s in self.target_span)
        n, t = len(self.pc), len(self.query_tokens)
        if self.gt_mask.shape != (n,) or not self.gt_mask.any():
            raise ValueError("gt_mask must have one entry per point and at least one positive")
        if not np.all(self.gt_box.contains(self.pc.coords[self.gt_mask])):
            raise ValueError("gt_box does not contain every positive point")
        s, e = self.target_span
        if not 0 <= s < e <= t:
            raise ValueError(f"target span {self.target_span} outside [0, {t})")

    @property
    def objects(self) -> list[GroundTruth]:
        """Target first, then anchors."""
        return [GroundTruth(self.gt_mask, self.gt_box, self.target_span)] + list(self.anchors)


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, n: int) -> list[Box3]:
    rx, ry = cfg.room
    boxes: list[Box3] = []
    tries = 0
    while len(boxes) < n:
        tries += 1
        if tries > 1000:
            raise RuntimeError(f"could not place {n} non-overlapping objects after 1000 tries")
        sx, sy = rng.uniform(*cfg.footprint, size=2)
        sz = rng.uniform(*cfg.height)
        if boxes and rng.random() < cfg.cluster_prob:
            # next to an existing object along a random side
            ref = boxes[int(rng.integers(len(boxes)))]
            gap = rng.uniform(*cfg.cluster_gap)
            axis = int(rng.integers(2))
            sign = 1 if rng.random() < 0.5 else -1
            c = np.array(ref.center[:2])
            half = np.array([sx, sy]) / 2
            c[axis] = ref.center[axis] + sign * (ref.size[axis] / 2 + gap + half[axis])
            c[1 - axis] += rng.uniform(-0.3, 0.3)
            cx, cy = c
        else:
            cx = rng.uniform(sx / 2, rx - sx / 2)
            cy = rng.uniform(sy / 2, ry - sy / 2)
        if not (sx / 2 <= cx <= rx - sx / 2 and sy / 2 <= cy <= ry - sy / 2):
            continue
        cand = Box3((cx, cy, sz / 2), (sx, sy, sz))
        grown = Box3(cand.center, tuple(np.array(cand.size) + [cfg.min_gap, cfg.min_gap, 0.0]))
        if any(iou3(grown, b) > 0 for b in boxes):
            continue
        boxes.append(cand)
    return boxes


def _sample_surface(box: Box3, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over the top and four side faces."""
    sx, sy, sz = box.size
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    p = box.lo + u * np.array(box.size)
    lo, hi = box.lo, box.hi
    p[face == 0, 2] = hi[2]
    p[face == 1, 1] = lo[1]
    p[face == 2, 1] = hi[1]
    p[face == 3, 0] = lo[0]
    p[face == 4, 0] = hi[0]
    return p


def point_features(cfg: SceneConfig, cls: str, color: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class one-hot, RGB and harmonic RGB plus noise; invalid rows lose the one-hot."""
    rgb = np.array(COLORS[color])
    onehot = np.zeros(len(cfg.classes))
    onehot[cfg.classes.index(cls)] = 1.0
    f = np.tile(np.concatenate([onehot, rgb, harmonic_encode(rgb, cfg.octaves)]), (n, 1))
    if cfg.noise > 0:
        f = f + rng.normal(0.0, cfg.noise, size=f.shape)
    valid = rng.random(n) >= cfg.invalid_frac
    f[~valid, :len(cfg.classes)] = 0.0
    return f, valid


def strip_semantic(pc: FeaturizedPointCloud, n_classes: int = len(CLASSES)) -> FeaturizedPointCloud:
    """RGB-only view of a cloud: drop the class slice, every point valid."""
    return FeaturizedPointCloud(pc.coords, pc.feats[:, n_classes:], np.ones(len(pc), dtype=bool))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None, scene_id: int = 0) -> Scene:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    pool = rng.choice(len(cfg.classes), size=min(cfg.classes_per_scene, len(cfg.classes)), replace=False)
    boxes = _place_objects(cfg, rng, n)
    spec = VoxelGridSpec(cfg.voxel_size)
    objects, coords, feats, valid, labels = [], [], [], [], []
    for k, box in enumerate(boxes):
        cls = cfg.classes[int(rng.choice(pool))]
        color = cfg.colors[int(rng.integers(len(cfg.colors)))]
        m = int(rng.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
        pts = _sample_surface(box, m, rng)
        f, v = point_features(cfg, cls, color, m, rng)
        vox = voxelize(pts, f, spec, v)
        objects.append(SceneObject(cls, color, box))
        coords.append(vox.coords)
        feats.append(vox.feats)
        valid.append(vox.valid)
        labels.append(np.full(len(vox), k))
    pc = FeaturizedPointCloud(np.concatenate(coords), np.concatenate(feats), np.concatenate(valid))
    if cfg.features == "rgb":
        pc = strip_semantic(pc, len(cfg.classes))
    scene = Scene(objects, pc, np.concatenate(labels), scene_id)
    for i in range(n):
        for j in range(i + 1, n):
            assert iou3(scene.object_box(i), scene.object_box(j)) == 0.0
    return scene


def _unique(scene: Scene, cls: str) -> int | None:
    hits = [k for k, o in enumerate(scene.objects) if o.cls == cls]
    return hits[0] if len(hits) == 1 else None


def resolve_nearest(centers: np.ndarray, candidates, anchor_point, margin: float = 0.25) -> int | None:
    """Candidate closest to ``anchor_point``, or None when the runner-up is within ``margin``."""
    d = np.linalg.norm(centers[list(candidates)] - anchor_point, axis=1)
    order = np.argsort(d, kind="stable")
    if len(order) > 1 and d[order[1]] < d[order[0]] * (1 + margin):
        return None
    return list(candidates)[order[0]]


def generate_queries(scene: Scene, templates=TEMPLATES, vocab: Vocab = VOCAB, margin: float = 0.25) -> list[SceneSample]:
    """Every unambiguous instantiation of the templates in this scene."""
    objs = scene.objects
    centers = scene.centers()
    classes = sorted({o.cls for o in objs}, key=lambda c: CLASSES.index(c) if c in CLASSES else 0)
    specs: list[tuple[str, str, int, int, list[tuple[int, int]]]] = []  # template, text, target, span start, anchors

    if "attribute" in templates:
        for k, o in enumerate(objs):
            if sum(1 for p in objs if p.cls == o.cls and p.color == o.color) == 1:
                specs.append(("attribute", f"the {o.color} {o.cls}", k, 2, []))

    for cls in classes:
        cands = [k for k, o in enumerate(objs) if o.cls == cls]
        if len(cands) < 2:
            continue
        if "nearest" in templates:
            for anc in classes:
                a = _unique(scene, anc)
                if anc == cls or a is None:
                    continue
                tgt = resolve_nearest(centers, cands, centers[a], margin)
                if tgt is not None:
                    specs.append(("nearest", f"the {cls} closest to the {anc}", tgt, 1, [(a, 5)]))
        if "between" in templates:
            for i, a_cls in enumerate(classes):
                for b_cls in classes[i + 1:]:
                    a, b = _unique(scene, a_cls), _unique(scene, b_cls)
                    if cls in (a_cls, b_cls) or a is None or b is None:
                        continue
                    mid = (centers[a] + centers[b]) / 2
                    tgt = resolve_nearest(centers, cands, mid, margin)
                    if tgt is None:
                        continue
                    if np.linalg.norm(centers[tgt] - mid) > np.linalg.norm(centers[a] - centers[b]) / 2:
                        continue
                    specs.append(("between", f"the {cls} between the {a_cls} and the {b_cls}", tgt, 1,
                                  [(a, 4), (b, 7)]))

    samples = []
    for qid, (tmpl, text, tgt, start, anchors) in enumerate(specs):
        samples.append(SceneSample(
            pc=scene.pc,
            query_tokens=tokenize(text, vocab),
            gt_mask=scene.object_mask(tgt),
            gt_box=scene.object_box(tgt),
            target_span=(start, start + 1),
            anchors=[GroundTruth(scene.object_mask(a), scene.object_box(a), (s, s + 1)) for a, s in anchors],
            text=text,
            template=tmpl,
            scene_id=scene.scene_id,
            query_id=qid,
        ))
    return samples


def target_object(scene: Scene, sample: SceneSample) -> int:
    return int(np.bincount(scene.labels[sample.gt_mask]).argmax())


def generate_dataset(cfg: SceneConfig, n_scenes: int, queries_per_scene: int = 2, seed: int | None = None,
                     first_id: int = 0) -> tuple[list[Scene], list[SceneSample]]:
    """Scenes plus up to ``queries_per_scene`` samples each, relational templates first.

    Each scene draws from its own child of the master seed, so scene ``i`` is
    identical regardless of how many scenes are requested.
    """
    seed = cfg.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(first_id + n_scenes)[first_id:]
    scenes, samples = [], []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        scene = generate_scene(cfg, rng, scene_id=first_id + i)
        qs = generate_queries(scene)
        by_t = {t: [q for q in qs if q.template == t] for t in TEMPLATES}
        perms = {t: rng.permutation(len(by_t[t])) for t in ("nearest", "between", "attribute")}
        picked = []
        # round-robin over templates (relational first) so all kinds appear
        for rnd in range(queries_per_scene):
            for t in ("nearest", "between", "attribute"):
                if len(picked) >= queries_per_scene:
                    break
                if rnd < len(by_t[t]):
                    picked.append(by_t[t][int(perms[t][rnd])])
        scenes.append(scene)
        samples.extend(picked)
    return scenes, samples


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_scene(sample: SceneSample, path) -> None:
    """Text header then little-endian binary sections."""
    pc = sample.pc
    n, d, t, a = len(pc), pc.dim, len(sample.query_tokens), len(sample.anchors)
    head = (
        f"{SCENE_MAGIC}{SCENE_VERSION}\n"
        f"{n} {d} {t} {a}\n"
        f"{sample.scene_id} {sample.query_id}\n"
        f"template {sample.template or '-'}\n"
        f"text {sample.text}\n"
    )
    buf = io.BytesIO()
    buf.write(head.encode())
    buf.write(pc.coords.astype("<f8").tobytes())
    buf.write(pc.feats.astype("<f8").tobytes())
    buf.write(pc.valid.astype("u1").tobytes())
    buf.write(sample.gt_mask.astype("u1").tobytes())
    buf.write(sample.gt_box.as_array().astype("<f8").tobytes())
    buf.write(np.asarray(sample.query_tokens, dtype="<i4").tobytes())
    buf.write(np.asarray(sample.target_span, dtype="<i4").tobytes())
    for g in sample.anchors:
        buf.write(g.mask.astype("u1").tobytes())
        buf.write(g.box.as_array().astype("<f8").tobytes())
        buf.write(np.asarray(g.span, dtype="<i4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise ParseError(f"{self.path}: truncated header at byte offset {self.pos}")
        s = self.data[self.pos:end].decode("utf-8", errors="replace")
        self.pos = end + 1
        return s

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise ParseError(f"{self.path}: truncated body at byte offset {self.pos}, "
                             f"needed {size} bytes, {len(self.data) - self.pos} remain")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return out


def read_scene(path) -> SceneSample:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.line()
    if not magic.startswith(SCENE_MAGIC):
        raise ParseError(f"{path}: line 1: not a scene file")
    if magic != f"{SCENE_MAGIC}{SCENE_VERSION}":
        raise ParseError(f"{path}: unsupported scene format version {magic[len(SCENE_MAGIC):]!r} "
                         f"(expected {SCENE_VERSION})")
    try:
        n, d, t, a = (int(x) for x in r.line().split())
        scene_id, query_id = (int(x) for x in r.line().split())
    except ValueError as err:
        raise ParseError(f"{path}: malformed count line: {err}") from None
    tline = r.line()
    xline = r.line()
    if not tline.startswith("template ") or not xline.startswith("text"):
        raise ParseError(f"{path}: lines 4-5: expected 'template' and 'text' entries")
    template = tline[9:]
    text = xline[5:]
    coords = r.array("<f8", n * 3).reshape(n, 3)
    feats = r.array("<f8", n * d).reshape(n, d)
    valid = r.array("u1", n).astype(bool)
    mask = r.array("u1", n).astype(bool)
    box = Box3.from_array(r.array("<f8", 6))
    tokens = r.array("<i4", t).tolist()
    span = tuple(r.array("<i4", 2).tolist())
    anchors = []
    for _ in range(a):
        am = r.array("u1", n).astype(bool)
        ab = Box3.from_array(r.array("<f8", 6))
        asp = tuple(r.array("<i4", 2).tolist())
        anchors.append(GroundTruth(am, ab, asp))
    if r.pos != len(r.data):
        raise ParseError(f"{path}: {len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    return SceneSample(FeaturizedPointCloud(coords, feats, valid), tokens, mask, box, span, anchors,
                       text, "" if template == "-" else template, scene_id, query_id)


def write_dataset(samples, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = d / f"sample_{i:05d}.rfxs"
        write_scene(s, p)
        paths.append(p)
    return paths


def read_dataset(directory) -> list[SceneSample]:
    paths = sorted(Path(directory).glob("sample_*.rfxs"))
    if not paths:
        raise FileNotFoundError(f"no scene files in {directory}")
    return [read_scene(p) for p in paths]


def unique_clouds(samples) -> list[FeaturizedPointCloud]:
    seen, out = set(), []
    for s in samples:
        if s.scene_id not in seen:
            seen.add(s.scene_id)
            out.append(s.pc)
    return out


def write_pointcloud(coords, path) -> None:
    np.savetxt(path, np.asarray(coords).reshape(-1, 3), fmt="%.9g")


def read_pointcloud(path) -> np.ndarray:
    arr = np.loadtxt(path, comments="#", ndmin=2)
    if arr.shape[1] < 3:
        raise ParseError(f"{path}: expected at least 3 columns, got {arr.shape[1]}")
    return arr[:, :3]


def write_features(feats, valid, path) -> None:
    """``N d`` header line, row-major little-endian float32 values, N validity bytes."""
    feats = np.asarray(feats)
    valid = np.ones(len(feats), bool) if valid is None else np.asarray(valid, bool)
    with open(path, "wb") as fh:
        fh.write(f"{feats.shape[0]} {feats.shape[1]}\n".encode())
        fh.write(feats.astype("<f4").tobytes())
        fh.write(valid.astype("u1").tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), path)
    try:
        n, d = (int(x) for x in r.line().split())
    except ValueError:
        raise ParseError(f"{path}: line 1: expected 'N d' header") from None
    feats = r.array("<f4", n * d).reshape(n, d).astype(np.float64)
    valid = r.array("u1", n).astype(bool)
    if r.pos != len(r.data):
        raise ParseError(f"{path}: trailing bytes at offset {r.pos}")
    return feats, valid


def ingest_external_features(pointcloud_file, feature_file) -> FeaturizedPointCloud:
    coords = read_pointcloud(pointcloud_file)
    feats, valid = read_features(feature_file)
    if len(coords) != len(feats):
        raise ValueError(f"point count mismatch: point cloud has {len(coords)} points, "
                         f"feature file has {len(feats)} rows")
    return FeaturizedPointCloud(coords, feats, valid)


def write_text_embeddings(emb, path) -> None:
    emb = np.asarray(emb)
    with open(path, "wb") as fh:
        fh.write(f"{emb.shape[0]} {emb.shape[1]}\n".encode())
        fh.write(emb.astype("<f4").tobytes())


def read_text_embeddings(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    try:
        t, f = (int(x) for x in r.line().split())
    except ValueError:
        raise ParseError(f"{path}: line 1: expected 'T F' header") from None
    emb = r.array("<f4", t * f).reshape(t, f).astype(np.float64)
    if r.pos != len(r.data):
        raise ParseError(f"{path}: trailing bytes at offset {r.pos}")
    return emb


def with_features(sample: SceneSample, pc: FeaturizedPointCloud) -> SceneSample:
    return replace(sample, pc=pc)
