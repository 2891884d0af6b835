"""Evaluation: query selection, Acc@k reports, the DBSCAN box baseline,
PCA feature export and the flat run configuration used by the CLI."""

from __future__ import annotations

import ast
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .decoder import DecoderOutput
from .geom import Box3, NoDetection, box_from_mask, iou3

THRESHOLDS = (0.25, 0.5)
DEFAULT_DBSCAN_EPS = 0.10
DEFAULT_DBSCAN_MIN_PTS = 5
BOX_SOURCES = ("head", "mask", "dbscan")
SELECTIONS = ("align", "mask")


# ---------------------------------------------------------------------------
# query selection and reports
# ---------------------------------------------------------------------------

def span_mass(output: DecoderOutput, target_span) -> torch.Tensor:
    s, e = target_span
    return torch.softmax(output.align_logits.double(), dim=-1)[:, s:e].sum(-1)


def mask_confidence(output: DecoderOutput, threshold: float = 0.5) -> torch.Tensor:
    """Mean probability over the points each query selects (0 for empty masks)."""
    p = torch.sigmoid(output.mask_logits.double())
    sel = p > threshold
    n = sel.sum(-1)
    return torch.where(n > 0, (p * sel).sum(-1) / n.clamp_min(1), torch.zeros_like(n, dtype=p.dtype))


def _first_argmax(v: np.ndarray) -> int:
    return int(np.flatnonzero(v == v.max())[0])


def select_query(output: DecoderOutput, target_span, rule: str = "align") -> int:
    """Index of the query answering the referring phrase.

    ``align`` maximizes the alignment probability mass on the target span;
    ``mask`` maximizes mask confidence. Exact ties go to the lowest index.
    """
    if rule == "align":
        score = span_mass(output, target_span)
    elif rule == "mask":
        score = mask_confidence(output)
    else:
        raise ValueError(f"unknown selection rule {rule!r}; choose from {SELECTIONS}")
    return _first_argmax(score.detach().numpy())


@dataclass
class EvalReport:
    acc_at_25: float
    acc_at_50: float
    n: int
    mean_iou: float
    per_template: dict[str, dict[str, float]] = field(default_factory=dict)
    ious: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.acc_at_50 <= self.acc_at_25 <= 1:
            raise ValueError("report must satisfy 0 <= acc@50 <= acc@25 <= 1")

    def lines(self) -> list[tuple[str, str]]:
        out = [("n", str(self.n)), ("acc@25", f"{self.acc_at_25:.3f}"), ("acc@50", f"{self.acc_at_50:.3f}"),
               ("mean_iou", f"{self.mean_iou:.6f}")]
        for t, r in sorted(self.per_template.items()):
            out += [(f"{t}.n", str(int(r["n"]))), (f"{t}.acc@25", f"{r['acc@25']:.3f}"),
                    (f"{t}.acc@50", f"{r['acc@50']:.3f}")]
        return out


def report_from_ious(ious, templates, thresholds=THRESHOLDS) -> EvalReport:
    """Accuracy at each threshold with inclusive comparison ``iou >= t``."""
    ious = np.asarray(ious, dtype=np.float64)
    if len(ious) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    t25, t50 = thresholds
    per = {}
    templates = np.asarray(templates)
    for t in sorted(set(templates.tolist())):
        sel = ious[templates == t]
        per[t] = {"n": float(len(sel)), "acc@25": float(np.mean(sel >= t25)), "acc@50": float(np.mean(sel >= t50))}
    return EvalReport(float(np.mean(ious >= t25)), float(np.mean(ious >= t50)), len(ious), float(ious.mean()),
                      per, ious.tolist())


def predicted_box(output: DecoderOutput, q: int, sample, source: str = "head",
                  eps: float = DEFAULT_DBSCAN_EPS, min_pts: int = DEFAULT_DBSCAN_MIN_PTS) -> Box3 | None:
    if source == "head":
        return Box3.from_array(output.boxes[q].detach().double().numpy())
    probs = torch.sigmoid(output.mask_logits[q].detach().double()).numpy()
    try:
        if source == "mask":
            return box_from_mask(sample.pc, probs)
        if source == "dbscan":
            return dbscan_box(sample.pc, probs, 0.5, eps, min_pts)
    except NoDetection:
        return None
    raise ValueError(f"unknown box source {source!r}; choose from {BOX_SOURCES}")


@torch.no_grad()
def evaluate(model, dataset, thresholds=THRESHOLDS, box_source: str = "head", rule: str = "align",
             eps: float = DEFAULT_DBSCAN_EPS, min_pts: int = DEFAULT_DBSCAN_MIN_PTS) -> EvalReport:
    """Top-1 accuracy of the selected query's box against each sample's target box.

    A sample whose selected mask is empty (for mask-derived boxes) scores IoU 0.
    """
    was_training = model.training
    model.eval()
    ious, templates = [], []
    for sample in dataset:
        out = model(sample)[-1]
        q = select_query(out, sample.target_span, rule)
        box = predicted_box(out, q, sample, box_source, eps, min_pts)
        ious.append(0.0 if box is None else iou3(box, sample.gt_box))
        templates.append(sample.template)
    model.train(was_training)
    return report_from_ious(ious, templates, thresholds)


def evaluate_boxes(boxes, dataset, thresholds=THRESHOLDS) -> EvalReport:
    """Report for externally supplied predicted boxes, one per sample."""
    boxes = list(boxes)
    if len(boxes) != len(dataset):
        raise ValueError(f"{len(boxes)} predictions for {len(dataset)} samples")
    return report_from_ious([iou3(b, s.gt_box) for b, s in zip(boxes, dataset)],
                            [s.template for s in dataset], thresholds)


def read_predictions(path) -> list[Box3]:
    """TSV with columns ``index cx cy cz sx sy sz``; ``#`` lines are comments."""
    rows = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{ln}: expected 7 columns, got {len(parts)}")
        rows[int(parts[0])] = Box3.from_array([float(v) for v in parts[1:]])
    if sorted(rows) != list(range(len(rows))):
        raise ValueError(f"{path}: sample indices must be 0..{len(rows) - 1} without gaps")
    return [rows[i] for i in range(len(rows))]


def write_predictions(boxes, path) -> None:
    with open(path, "w") as fh:
        for i, b in enumerate(boxes):
            fh.write(f"{i}\t" + "\t".join(repr(float(v)) for v in b.as_array()) + "\n")


# ---------------------------------------------------------------------------
# density clustering
# ---------------------------------------------------------------------------

def dbscan(coords, eps: float = DEFAULT_DBSCAN_EPS, min_pts: int = DEFAULT_DBSCAN_MIN_PTS) -> np.ndarray:
    """Density clustering; returns one label per point, ``-1`` for noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are connected components of core points; a
    border point joins the cluster of its nearest core neighbor, ties broken
    by the lexicographically smallest core coordinate. Labels are numbered
    by first occurrence in input order, so the partition does not depend on
    point order.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    nbrs = tree.query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in nbrs])
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for i in range(n):
        if not core[i] or comp[i] >= 0:
            continue
        comp[i] = n_comp
        stack = [i]
        while stack:
            j = stack.pop()
            for m in nbrs[j]:
                if core[m] and comp[m] < 0:
                    comp[m] = n_comp
                    stack.append(m)
        n_comp += 1
    for i in np.flatnonzero(~core):
        cands = [m for m in nbrs[i] if core[m]]
        if not cands:
            continue
        d = np.linalg.norm(pts[cands] - pts[i], axis=1)
        best = min(range(len(cands)), key=lambda c: (d[c], *pts[cands[c]]))
        comp[i] = comp[cands[best]]
    # first-occurrence relabeling
    remap: dict[int, int] = {}
    for i in range(n):
        c = comp[i]
        if c >= 0:
            labels[i] = remap.setdefault(int(c), len(remap))
    return labels


def dbscan_box(pc, mask_probs, threshold: float = 0.5, eps: float = DEFAULT_DBSCAN_EPS,
               min_pts: int = DEFAULT_DBSCAN_MIN_PTS) -> Box3:
    """Bounds of the largest density cluster among the selected points.

    Falls back to the plain mask box when every selected point is noise.
    """
    coords = pc.coords if hasattr(pc, "coords") else np.asarray(pc, dtype=np.float64)
    probs = np.asarray(mask_probs, dtype=np.float64).reshape(-1)
    sel = probs >= threshold
    if not sel.any():
        raise NoDetection(f"no point above threshold {threshold}")
    pts = coords[sel]
    labels = dbscan(pts, eps, min_pts)
    if (labels < 0).all():
        return box_from_mask(coords, probs, threshold)
    counts = np.bincount(labels[labels >= 0])
    # labels follow first occurrence, so argmax's lowest-label tie-break is the lowest first index
    keep = pts[labels == int(np.argmax(counts))]
    return Box3.from_bounds(keep.min(axis=0), keep.max(axis=0))


# ---------------------------------------------------------------------------
# PCA export
# ---------------------------------------------------------------------------

@dataclass
class PcaResult:
    projection: np.ndarray  # (N, k) scaled to [0, 1] per component
    explained: np.ndarray  # (k,) variance fractions
    components: np.ndarray  # (k, d)
    eigenvalues: np.ndarray  # (k,)


def power_eig(cov: np.ndarray, k: int, iters: int = 20000, tol: float = 1e-15,
              seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    rng = np.random.default_rng(seed)
    a = np.array(cov, dtype=np.float64)
    d = a.shape[0]
    scale = max(float(np.abs(a).max()), 1e-300)
    vals, vecs = [], []
    for _ in range(k):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = a @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-14 * scale:
                lam = 0.0
                break
            w /= nw
            lam_new = float(w @ a @ w)
            done = np.linalg.norm(w - v) < 1e-13 or abs(lam_new - lam) <= tol * scale
            v, lam = w, lam_new
            if done:
                break
        if lam <= 1e-14 * scale:
            # remaining spectrum is zero: any orthonormal completion works
            lam = 0.0
            basis = np.eye(d)
            for u in vecs:
                basis -= np.outer(basis @ u, u)
            v = basis[int(np.argmax(np.linalg.norm(basis, axis=1)))]
            v /= np.linalg.norm(v)
        vals.append(lam)
        vecs.append(v)
        a = a - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    rng = hi - lo
    return np.where(rng > 0, (x - lo) / np.where(rng > 0, rng, 1.0), 0.0)


def pca_export(features, k: int = 3, seed: int = 0) -> PcaResult:
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < k or k > d or k < 1:
        raise ValueError(f"need 1 <= k <= min(N, d); got k={k}, N={n}, d={d}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / n
    total = float(np.trace(cov))
    if total <= 0:
        return PcaResult(np.zeros((n, k)), np.zeros(k), np.eye(d)[:k], np.zeros(k))
    vals, vecs = power_eig(cov, k, seed=seed)
    # deterministic sign: largest-magnitude entry positive
    for i in range(k):
        j = int(np.argmax(np.abs(vecs[i])))
        if vecs[i, j] < 0:
            vecs[i] = -vecs[i]
    raw = xc @ vecs.T
    return PcaResult(_minmax(raw), vals / total, vecs, vals)


def write_colored_cloud(coords, rgb01, path) -> None:
    """ASCII ``x y z r g b`` with 8-bit colors."""
    c = np.clip(np.round(np.asarray(rgb01) * 255), 0, 255).astype(int)
    with open(path, "w") as fh:
        for p, col in zip(np.asarray(coords), c):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {col[0]} {col[1]} {col[2]}\n")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


DEFAULTS: "OrderedDict[str, object]" = OrderedDict([
    ("data.dir", ""),
    ("data.n_scenes", 16),
    ("data.queries_per_scene", 2),
    ("data.first_id", 0),
    ("data.features", "semantic"),
    ("data.points_min", 300),
    ("data.points_max", 600),
    ("data.voxel_size", 0.1),
    ("data.noise", 0.05),
    ("data.invalid_frac", 0.05),
    ("enc.d_model", 48),
    ("enc.heads", 4),
    ("enc.layers", 2),
    ("enc.group_size", 256),
    ("enc.shift_groups", True),
    ("pretrain.steps", 50),
    ("pretrain.batch_size", 4),
    ("pretrain.lr", 1e-3),
    ("pretrain.momentum", 0.998),
    ("pretrain.mask", "serialized"),
    ("pretrain.ratio_min", 0.2),
    ("pretrain.ratio_max", 0.5),
    ("dec.d_model", 96),
    ("dec.blocks", 3),
    ("dec.queries", 16),
    ("train.encoder", "none"),
    ("train.init", ""),
    ("train.epochs", 4),
    ("train.batch_size", 1),
    ("train.lr", 1e-3),
    ("train.clip", 1.0),
    ("train.ema", 0.999),
    ("eval.model", ""),
    ("eval.predictions", ""),
    ("eval.box", "head"),
    ("eval.select", "align"),
    ("dbscan.eps", 0.2),
    ("dbscan.min_pts", 5),
    ("probe.encoder", ""),
    ("probe.hidden", 64),
    ("probe.steps", 400),
    ("probe.lr", 1e-2),
    ("probe.train_frac", 0.5),
    ("pca.k", 3),
    ("pca.cloud", ""),
    ("pca.features", ""),
    ("preprocess.capture", ""),
    ("gradcheck.eps", 1e-6),
    ("gradcheck.tol", 1e-4),
    ("plots", True),
])

CHOICES = {
    "data.features": ("semantic", "rgb"),
    "pretrain.mask": ("serialized", "radius", "fixed"),
    "train.encoder": ("none", "random", "jepa"),
    "eval.box": BOX_SOURCES,
    "eval.select": SELECTIONS,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = ast.literal_eval(raw)
    if key in CHOICES and raw not in CHOICES[key]:
        raise ConfigError(f"{key}: {raw!r} not one of {CHOICES[key]}")
    return raw


@dataclass
class RunConfig:
    values: "OrderedDict[str, object]" = field(default_factory=lambda: OrderedDict(DEFAULTS))
    seed: int = 0

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw)

    def apply_text(self, text: str, source: str = "<config>") -> None:
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{ln}: expected 'key = value'")
            k, v = line.split("=", 1)
            try:
                self.set(k.strip(), v)
            except ConfigError as err:
                raise ConfigError(f"{source}:{ln}: {err}") from None

    @classmethod
    def resolve(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {path}")
            cfg.apply_text(p.read_text(), str(path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        if seed is not None:
            if seed < 0 or seed >= 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg.seed = seed
        return cfg

    def lines(self) -> list[tuple[str, str]]:
        out = [("seed", str(self.seed))]
        for k, v in self.values.items():
            out.append((f"config.{k}", str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)))
        return out
