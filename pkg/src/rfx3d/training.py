"""Supervised fine-tuning: set-prediction losses with Hungarian matching,
deep supervision, the stage-wise learning-rate schedule, k-NN label transfer
and the optimizer step over encoder and decoder parameter groups."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .data import GroundTruth
from .decoder import DecoderOutput, LocalizationModel
from .nncore import EmaState, ParamStore, adamw_step, clip_grad_norm, ema_update

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    ce: float = 4.0
    mask: float = 6.0
    dice: float = 4.0
    box: float = 1.0
    giou: float = 1.0
    align: float | None = None  # None reuses the class weight

    def __post_init__(self):
        vals = [self.ce, self.mask, self.dice, self.box, self.giou, self.align_weight]
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be non-negative with at least one positive")

    @property
    def align_weight(self) -> float:
        return self.ce if self.align is None else self.align


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query, gt) ordered by gt
    unmatched: list[int]

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gts(self) -> list[int]:
        return [k for _, k in self.pairs]


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def dice_loss(pred_probs, gt, eps: float = 1.0):
    gt = torch.as_tensor(gt, dtype=pred_probs.dtype)
    inter = (pred_probs * gt).sum(-1)
    return 1.0 - (2.0 * inter + eps) / (pred_probs.sum(-1) + gt.sum(-1) + eps)


def mask_ce_loss(pred_logits, gt):
    gt = torch.as_tensor(gt, dtype=pred_logits.dtype)
    p = torch.sigmoid(pred_logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean(-1)


def focal_align_loss(align_logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Softmax focal loss ``-alpha (1 - p_t)^gamma log p_t`` averaged over queries."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    logp = torch.log_softmax(align_logits, dim=-1)
    logp_t = logp.gather(1, targets[:, None]).squeeze(1)
    p_t = logp_t.exp()
    return (-alpha * (1 - p_t) ** gamma * logp_t).mean()


def box_corners(b):
    return b[..., :3] - b[..., 3:] / 2, b[..., :3] + b[..., 3:] / 2


def giou_pairwise(a, b):
    """IoU and GIoU between boxes ``a`` (..., 6) and ``b`` (..., 6), broadcasting."""
    alo, ahi = box_corners(a)
    blo, bhi = box_corners(b)
    inter = torch.clamp(torch.minimum(ahi, bhi) - torch.maximum(alo, blo), min=0).prod(-1)
    union = a[..., 3:].prod(-1) + b[..., 3:].prod(-1) - inter
    hull = (torch.maximum(ahi, bhi) - torch.minimum(alo, blo)).prod(-1)
    iou = inter / union
    return iou, iou - (hull - union) / hull


def _gt_tensors(gts, dtype):
    masks = torch.as_tensor(np.stack([g.mask for g in gts]), dtype=dtype)
    boxes = torch.as_tensor(np.stack([g.box.as_array() for g in gts]), dtype=dtype)
    cols = [g.span[0] for g in gts]
    return masks, boxes, cols


@torch.no_grad()
def matching_cost(output: DecoderOutput, gts, weights: LossWeights | None = None) -> np.ndarray:
    """``(Q, K)`` cost between predictions and ground-truth objects."""
    weights = weights or LossWeights()
    if not gts:
        raise ValueError("matching needs at least one ground-truth object")
    logits = output.mask_logits.double()
    masks, boxes, cols = _gt_tensors(gts, torch.float64)
    p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    n = logits.shape[1]
    ce = -(torch.log(p) @ masks.T + torch.log(1 - p) @ (1 - masks).T) / n
    dice = 1 - (2 * p @ masks.T + 1) / (p.sum(1, keepdim=True) + masks.sum(1)[None] + 1)
    pb = output.boxes.double()
    l1 = (pb[:, None, :] - boxes[None]).abs().sum(-1)
    _, giou = giou_pairwise(pb[:, None, :], boxes[None])
    prob = torch.softmax(output.align_logits.double(), dim=-1)[:, cols]
    cost = (weights.mask * ce + weights.dice * dice + weights.box * l1
            + weights.giou * (1 - giou) + weights.ce * (1 - prob))
    return cost.numpy()


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def _lsa(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Shortest-augmenting-path assignment for ``rows <= cols``; returns the
    column of each row and the total cost."""
    n, m = cost.shape
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, float(cost[np.arange(n), col_of_row].sum())


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of every column (GT) to a row (query).

    Among optimal assignments the one whose query list, read in GT order, is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    q, k = cost.shape
    if q < k:
        raise ValueError(f"{q} queries cannot cover {k} ground-truth objects")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    ct = cost.T  # rows = GT, cols = queries
    cols, best = _lsa(ct)
    tol = 1e-9 * max(1.0, abs(best))
    fixed: dict[int, int] = {}
    for g in range(k):
        for cand in range(q):
            if cand > cols[g]:
                break
            if cand in fixed.values():
                continue
            if cand == cols[g]:
                fixed[g] = cand
                break
            # can GT g take query cand and still reach the optimum?
            rest_g = [r for r in range(k) if r != g and r not in fixed]
            used = set(fixed.values()) | {cand}
            rest_q = [c for c in range(q) if c not in used]
            partial = ct[g, cand] + sum(ct[r, c] for r, c in fixed.items())
            if rest_g:
                sub_cols, sub = _lsa(ct[np.ix_(rest_g, rest_q)])
            else:
                sub_cols, sub = np.zeros(0, dtype=np.int64), 0.0
            if partial + sub <= best + tol:
                fixed[g] = cand
                cols = cols.copy()
                cols[g] = cand
                for r, c in zip(rest_g, sub_cols):
                    cols[r] = rest_q[c]
                break
    pairs = [(int(cols[g]), g) for g in range(k)]
    taken = set(cols.tolist())
    return Assignment(pairs, [i for i in range(q) if i not in taken])


def assignment_cost(cost, a: Assignment) -> float:
    cost = np.asarray(cost)
    return float(sum(cost[qi, ki] for qi, ki in a.pairs))


def brute_force_assignment(cost) -> float:
    """Exhaustive minimum over all injections GT -> query (test oracle)."""
    cost = np.asarray(cost, dtype=np.float64)
    q, k = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(q), k):
        best = min(best, float(sum(cost[perm[j], j] for j in range(k))))
    return best


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------

TERMS = ("dice", "mask_ce", "box_l1", "giou", "align")


def layer_loss(out: DecoderOutput, gts, weights: LossWeights, alpha: float = 0.25, gamma: float = 2.0):
    # non-finite predictions still get a matching; the loss itself stays non-finite
    cost = np.nan_to_num(matching_cost(out, gts, weights), nan=1e30, posinf=1e30, neginf=-1e30)
    a = hungarian(cost)
    masks, boxes, cols = _gt_tensors(gts, out.mask_logits.dtype)
    qi = torch.as_tensor(a.queries, dtype=torch.long)
    ki = torch.as_tensor(a.gts, dtype=torch.long)
    logits = out.mask_logits[qi]
    gm = masks[ki]
    terms = {
        "dice": dice_loss(torch.sigmoid(logits), gm).mean(),
        "mask_ce": mask_ce_loss(logits, gm).mean(),
        "box_l1": (out.boxes[qi] - boxes[ki]).abs().sum(-1).mean(),
        "giou": (1 - giou_pairwise(out.boxes[qi], boxes[ki])[1]).mean(),
    }
    no_text = out.align_logits.shape[1] - 1
    targets = torch.full((out.align_logits.shape[0],), no_text, dtype=torch.long)
    targets[qi] = torch.as_tensor([cols[k] for k in a.gts], dtype=torch.long)
    terms["align"] = focal_align_loss(out.align_logits, targets, alpha, gamma)
    total = (weights.dice * terms["dice"] + weights.mask * terms["mask_ce"] + weights.box * terms["box_l1"]
             + weights.giou * terms["giou"] + weights.align_weight * terms["align"])
    return total, terms


def deep_supervision_weights(n: int) -> list[float]:
    return [(l + 1) / n for l in range(n)]


def composite_loss(outputs, gts, weights: LossWeights | None = None, layer_weights=None,
                   alpha: float = 0.25, gamma: float = 2.0):
    """Sum over decoder layers of ``w_l * L_l``; returns (total, per-term dict of the last layer)."""
    weights = weights or LossWeights()
    if not gts:
        raise ValueError("every sample needs at least one ground-truth object")
    layer_weights = deep_supervision_weights(len(outputs)) if layer_weights is None else layer_weights
    total = 0.0
    terms = {}
    for w, out in zip(layer_weights, outputs):
        l, terms = layer_loss(out, gts, weights, alpha, gamma)
        total = total + w * l
    return total, terms


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSchedule:
    total_epochs: float = 40.0
    boundaries: tuple[float, float, float] = (10.0, 14.0, 17.0)
    ramp_scale: float = 0.25
    joint_scale: float = 0.5
    warmup_epochs: float = 1.0
    min_lr_frac: float = 0.01

    def __post_init__(self):
        b = (0.0,) + tuple(self.boundaries) + (self.total_epochs,)
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("phase boundaries must increase strictly within (0, total_epochs)")
        if not 0 <= self.ramp_scale <= 1 or not 0 <= self.joint_scale <= 1:
            raise ValueError("encoder scales must lie in [0, 1]")

    def scaled(self, total: float) -> "StageSchedule":
        """Same phase proportions over ``total`` epochs."""
        f = total / self.total_epochs
        return StageSchedule(total, tuple(b * f for b in self.boundaries), self.ramp_scale, self.joint_scale,
                             self.warmup_epochs * f, self.min_lr_frac)

    def phase(self, epoch: float) -> int:
        for i, b in enumerate(self.boundaries):
            if epoch < b:
                return i + 1
        return 4


def stagewise_lr(epoch: float, base_lr: float, sched: StageSchedule | None = None) -> tuple[float, float]:
    """(encoder_lr, decoder_lr) at a (possibly fractional) epoch.

    Phase 1 freezes the encoder; phase 2 ramps it linearly to ``ramp_scale``
    of the decoder rate; phase 3 holds there; phase 4 cosine-decays both with
    the encoder at ``joint_scale`` of the decoder.
    """
    s = sched or StageSchedule()
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    b1, b2, b3 = s.boundaries
    phase = s.phase(epoch)
    if phase < 4:
        warm = min(1.0, (epoch + s.warmup_epochs * 0.1) / s.warmup_epochs) if s.warmup_epochs > 0 else 1.0
        dec = base_lr * warm
        if phase == 1:
            return 0.0, dec
        if phase == 2:
            return dec * s.ramp_scale * (epoch - b1) / (b2 - b1), dec
        return dec * s.ramp_scale, dec
    frac = (epoch - b3) / (s.total_epochs - b3)
    dec = base_lr * (s.min_lr_frac + (1 - s.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
    return s.joint_scale * dec, dec


# ---------------------------------------------------------------------------
# sensor-space label transfer
# ---------------------------------------------------------------------------

def transfer_labels_knn(ref_coords, ref_labels, query_coords, k: int = 8, eps: float = 1e-6):
    """Inverse-distance-weighted vote of the ``k`` nearest references.

    Returns (probabilities, binary labels) with binary = prob >= 0.5.
    """
    ref = np.asarray(ref_coords, dtype=np.float64).reshape(-1, 3)
    lab = np.asarray(ref_labels, dtype=np.float64).reshape(-1)
    qry = np.asarray(query_coords, dtype=np.float64).reshape(-1, 3)
    if len(ref) == 0:
        raise ValueError("reference set is empty")
    if len(lab) != len(ref):
        raise ValueError("one label per reference point required")
    if not 1 <= k <= len(ref):
        raise ValueError(f"k must lie in [1, {len(ref)}]")
    d, idx = cKDTree(ref).query(qry, k=k)
    d = d.reshape(len(qry), k)
    idx = idx.reshape(len(qry), k)
    w = 1.0 / (d + eps)
    prob = (w * lab[idx]).sum(1) / w.sum(1)
    return prob, prob >= 0.5


# ---------------------------------------------------------------------------
# optimization step
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    store: ParamStore
    ema: EmaState
    step: int = 0
    skipped: int = 0

    @classmethod
    def create(cls, model: LocalizationModel, ema_momentum: float = 0.999) -> "TrainState":
        groups = model.param_groups()
        store = ParamStore.from_modules(**groups)
        shadow = EmaState.of(model, ema_momentum)
        return cls(store, shadow)


def ema_momentum_at(step: int, momentum: float) -> float:
    """EMA momentum with a warmup so early averages are not dominated by the initialization."""
    return min(momentum, (1.0 + step) / (10.0 + step))


def group_lrs(epoch: float, base_lr: float, sched: StageSchedule) -> dict[str, float]:
    enc, dec = stagewise_lr(epoch, base_lr, sched)
    return {"encoder": enc, "decoder": dec, "text": dec}


def finetune_step(batch, model: LocalizationModel, state: TrainState, weights: LossWeights | None = None,
                  sched: StageSchedule | None = None, epoch: float = 0.0, base_lr: float = 1e-3,
                  clip: float = 1.0, alpha: float = 0.25, gamma: float = 2.0,
                  weight_decay: float = 0.01) -> dict[str, float]:
    """Forward, composite loss, backward and one AdamW step on a list of samples."""
    weights = weights or LossWeights()
    sched = sched or StageSchedule()
    lrs = group_lrs(epoch, base_lr, sched)
    freeze = model.encoder is not None and lrs["encoder"] == 0.0
    losses, term_acc = [], {t: 0.0 for t in TERMS}
    for sample in batch:
        latents = None
        if freeze:
            with torch.no_grad():
                latents = model.latents(sample.pc)
        outs = model(sample, latents=latents)
        loss, terms = composite_loss(outs, sample.objects, weights, alpha=alpha, gamma=gamma)
        losses.append(loss)
        for t in TERMS:
            term_acc[t] += float(terms[t].detach()) / len(batch)
    loss = torch.stack(losses).mean()
    metrics = {"loss": float(loss.detach()), **term_acc,
               "encoder_lr": lrs["encoder"], "decoder_lr": lrs["decoder"], "skipped": 0.0}
    if not math.isfinite(metrics["loss"]):
        state.skipped += 1
        metrics["skipped"] = 1.0
        return metrics
    state.store.zero_grad()
    loss.backward()
    grads = state.store.grads()
    metrics["grad_norm"] = clip_grad_norm(grads, clip)
    if not adamw_step(state.store, grads, lr=lrs, weight_decay=weight_decay):
        state.skipped += 1
        metrics["skipped"] = 1.0
        return metrics
    state.step += 1
    ema_update(state.ema, model, ema_momentum_at(state.step, state.ema.momentum))
    return metrics


def eval_copy(model: LocalizationModel, state: TrainState) -> LocalizationModel:
    """A copy of ``model`` carrying the EMA weights."""
    import copy

    m = copy.deepcopy(model)
    state.ema.copy_to(m)
    return m


def fit(model: LocalizationModel, samples, epochs: float, base_lr: float = 1e-3, batch_size: int = 1,
        seed: int = 0, sched: StageSchedule | None = None, weights: LossWeights | None = None,
        state: TrainState | None = None, ema_momentum: float = 0.999, clip: float = 1.0,
        max_steps: int | None = None, on_step=None) -> tuple[TrainState, list[dict[str, float]]]:
    """Shuffled mini-batch fine-tuning over ``epochs`` passes.

    The stage schedule is stretched to ``epochs``; ``on_step(step, metrics)``
    may return True to stop early.
    """
    if not samples:
        raise ValueError("no training samples")
    sched = sched or StageSchedule().scaled(epochs)
    state = state or TrainState.create(model, ema_momentum)
    rng = np.random.default_rng(seed)
    per_epoch = max(1, math.ceil(len(samples) / batch_size))
    total = math.ceil(epochs * per_epoch) if max_steps is None else max_steps
    history = []
    order, cursor = rng.permutation(len(samples)), 0
    for step in range(total):
        batch = []
        for _ in range(batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(samples)), 0
            batch.append(samples[order[cursor]])
            cursor += 1
        epoch = min(step / per_epoch, sched.total_epochs * (1 - 1e-12))
        m = finetune_step(batch, model, state, weights, sched, epoch, base_lr, clip)
        m["epoch"] = epoch
        m["step"] = float(step)
        history.append(m)
        if on_step is not None and on_step(step, m):
            break
    return state, history
