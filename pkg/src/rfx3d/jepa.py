"""Latent masked prediction on featurized point clouds.

A serialized grouped-attention context encoder, a block-sparse predictor with
mask and register tokens, the latent regression loss against a stop-gradient
EMA target encoder, and point-wise probes for inspecting learned features.
"""

from __future__ import annotations

import copy
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import geom
from .geom import FeaturizedPointCloud, VoxelGridSpec
from .masking import MaskSpec, make_mask
from .nncore import (
    EmaState,
    LayerNorm,
    Linear,
    Mlp,
    MultiHeadAttention,
    ParamStore,
    adamw_step,
    attention,
    block_sparse_mask,
    ema_update,
    merge_heads,
    rotary_xyz,
    split_heads,
    token_param,
)

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    d_in: int
    d_model: int = 48
    heads: int = 4
    layers: int = 2
    group_size: int = 48
    # leading feature dims swapped for the learned vector on invalid points; None = all dims
    semantic_dim: int | None = None
    serial_voxel: float = 0.05
    rope_base: float = 10000.0
    shift_groups: bool = True
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d_model % self.heads or (self.d_model // self.heads) % 6:
            raise ValueError("d_model / heads must be a multiple of 6 for rotary embeddings")

    @property
    def sem_dim(self) -> int:
        return self.d_in if self.semantic_dim is None else self.semantic_dim


@dataclass
class PredictorConfig:
    d_model: int = 48
    heads: int = 4
    layers: int = 2
    n_registers: int = 4
    rope_base: float = 10000.0
    mlp_ratio: int = 2


class Grouping:
    """Padded gather indices for attention inside contiguous serialized groups."""

    def __init__(self, order: np.ndarray, group_size: int, offset: int = 0):
        groups = geom.group(order, group_size, offset)
        width = max(len(g) for g in groups)
        n = len(order)
        idx = np.zeros((len(groups), width), dtype=np.int64)
        pad = np.ones((len(groups), width), dtype=bool)
        for i, g in enumerate(groups):
            idx[i, :len(g)] = g
            pad[i, :len(g)] = False
        flat = np.flatnonzero(~pad.ravel())
        inv = np.empty(n, dtype=np.int64)
        inv[idx.ravel()[flat]] = flat
        self.idx = torch.from_numpy(idx)
        self.inv = torch.from_numpy(inv)
        self.n_groups = len(groups)
        self.width = width
        key_mask = torch.zeros((len(groups), 1, 1, width), dtype=torch.float64)
        key_mask[torch.from_numpy(pad)[:, None, None, :]] = float("-inf")
        self.key_mask = key_mask


def groupings_for(coords: np.ndarray, cfg: EncoderConfig) -> list[Grouping]:
    spec = VoxelGridSpec.covering(coords, cfg.serial_voxel)
    order = geom.serialize_order(coords, spec)
    out = []
    for layer in range(cfg.layers):
        offset = cfg.group_size // 2 if (cfg.shift_groups and layer % 2 == 1) else 0
        out.append(Grouping(order, cfg.group_size, offset))
    return out


class GroupedBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rope_base=cfg.rope_base)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_ratio * d)

    def forward(self, x, coords, grouping: Grouping):
        h = self.norm1(x)[grouping.idx]
        c = coords[grouping.idx]
        a = self.attn(h, mask=grouping.key_mask.to(x.dtype), q_coords=c)
        x = x + a.reshape(-1, x.shape[-1])[grouping.inv]
        return x + self.mlp(self.norm2(x))


class PointEncoder(nn.Module):
    """Flat stack of grouped-attention blocks over a serialized cloud."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.missing = token_param(cfg.sem_dim)
        self.embed = Linear(cfg.d_in, cfg.d_model)
        self.blocks = nn.ModuleList(GroupedBlock(cfg) for _ in range(cfg.layers))
        self.norm = LayerNorm(cfg.d_model)

    def forward(self, coords, feats, valid, groupings=None):
        if coords.shape[0] == 0:
            raise ValueError("cannot encode an empty point cloud")
        if feats.shape[-1] != self.cfg.d_in:
            raise ValueError(f"encoder expects {self.cfg.d_in} feature dims, got {feats.shape[-1]}")
        sem = self.cfg.sem_dim
        if sem:
            sub = torch.where(valid[:, None], feats[:, :sem], self.missing.to(feats.dtype).expand(len(feats), sem))
            feats = torch.cat([sub, feats[:, sem:]], dim=1)
        if groupings is None:
            groupings = groupings_for(coords.detach().cpu().numpy().astype(np.float64), self.cfg)
        x = self.embed(feats)
        for blk, grp in zip(self.blocks, groupings):
            x = blk(x, coords, grp)
        return self.norm(x)


def cloud_tensors(pc: FeaturizedPointCloud, dtype=torch.float32):
    return (torch.as_tensor(pc.coords, dtype=dtype), torch.as_tensor(pc.feats, dtype=dtype),
            torch.as_tensor(pc.valid, dtype=torch.bool))


def encode(pc: FeaturizedPointCloud, encoder: PointEncoder, dtype=None) -> torch.Tensor:
    if len(pc) == 0:
        raise ValueError("cannot encode an empty point cloud")
    dtype = dtype or next(encoder.parameters()).dtype
    return encoder(*cloud_tensors(pc, dtype))


class PredictorBlock(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rope_base=cfg.rope_base)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_ratio * d)

    def _sparse_attention(self, h, coords, n_ctx, n_mask):
        """Same result as dense attention under ``block_sparse_mask`` without
        materializing the (L, L) score matrix."""
        mha = self.attn
        q = rotary_xyz(split_heads(mha.q(h), mha.heads), coords[None], mha.rope_base)
        k = rotary_xyz(split_heads(mha.k(h), mha.heads), coords[None], mha.rope_base)
        v = split_heads(mha.v(h), mha.heads)
        scale = q.shape[-1] ** -0.5
        shared = torch.cat([k[:, :n_ctx], k[:, n_ctx + n_mask:]], dim=1)
        v_shared = torch.cat([v[:, :n_ctx], v[:, n_ctx + n_mask:]], dim=1)
        qm, km, vm = q[:, n_ctx:n_ctx + n_mask], k[:, n_ctx:n_ctx + n_mask], v[:, n_ctx:n_ctx + n_mask]
        s_m = torch.cat([qm @ shared.transpose(-1, -2), (qm * km).sum(-1, keepdim=True)], dim=-1) * scale
        w_m = torch.softmax(s_m, dim=-1)
        out_m = w_m[..., :-1] @ v_shared + w_m[..., -1:] * vm
        qr = q[:, n_ctx + n_mask:]
        out_r = torch.softmax((qr @ shared.transpose(-1, -2)) * scale, dim=-1) @ v_shared
        out = torch.cat([v[:, :n_ctx], out_m, out_r], dim=1)
        return mha.o(merge_heads(out))

    def forward(self, x, coords, n_ctx, n_mask, sparse=True):
        h = self.norm1(x)
        if sparse:
            a = self._sparse_attention(h, coords, n_ctx, n_mask)
        else:
            mask = block_sparse_mask(n_ctx, n_mask, x.shape[0] - n_ctx - n_mask, dtype=x.dtype)
            a = self.attn(h, mask=mask, q_coords=coords)
        x = x + a
        return x + self.mlp(self.norm2(x))


class Predictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.mask_token = token_param(d)
        self.registers = token_param(cfg.n_registers, d)
        self.blocks = nn.ModuleList(PredictorBlock(cfg) for _ in range(cfg.layers))
        self.norm = LayerNorm(d)
        self.out = Linear(d, d)

    def forward(self, ctx_latents, ctx_coords, masked_coords, sparse: bool = True):
        n_ctx, n_mask = ctx_latents.shape[0], masked_coords.shape[0]
        if n_ctx == 0 or n_mask == 0:
            raise ValueError("predictor needs a nonempty context and at least one masked point")
        dt = ctx_latents.dtype
        regs = self.registers.to(dt)
        x = torch.cat([ctx_latents, self.mask_token.to(dt).expand(n_mask, -1), regs], dim=0)
        coords = torch.cat([ctx_coords.to(dt), masked_coords.to(dt),
                            torch.zeros((regs.shape[0], 3), dtype=dt)], dim=0)
        for blk in self.blocks:
            x = blk(x, coords, n_ctx, n_mask, sparse=sparse)
        return self.out(self.norm(x[n_ctx:n_ctx + n_mask]))


def predict_masked(context_latents, context_coords, masked_coords, predictor: Predictor):
    return predictor(context_latents, context_coords, masked_coords)


def jepa_loss(pred, target):
    """Mean squared latent error; the target is detached."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target.detach()) ** 2).mean()


@dataclass
class PretrainConfig:
    mask: str = "serialized"
    ratio_range: tuple[float, float] = (0.2, 0.5)
    block_range: tuple[float, float] = (0.02, 0.08)
    fixed_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.998
    weight_decay: float = 0.01


@dataclass
class JepaState:
    encoder: PointEncoder
    predictor: Predictor
    target: PointEncoder
    ema: EmaState
    store: ParamStore
    step: int = 0

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, pred_cfg: PredictorConfig | None = None, seed: int = 0,
               momentum: float = 0.998, dtype=torch.float32) -> "JepaState":
        torch.manual_seed(seed)
        pred_cfg = pred_cfg or PredictorConfig(d_model=enc_cfg.d_model, heads=enc_cfg.heads, rope_base=enc_cfg.rope_base)
        encoder = PointEncoder(enc_cfg).to(dtype)
        predictor = Predictor(pred_cfg).to(dtype)
        target = copy.deepcopy(encoder)
        for p in target.parameters():
            p.requires_grad_(False)
        ema = EmaState(OrderedDict((n, p.detach()) for n, p in target.named_parameters()), momentum)
        store = ParamStore.from_modules(encoder=encoder, predictor=predictor)
        return cls(encoder, predictor, target, ema, store)

    def target_checksum(self) -> float:
        return sum(float(p.double().sum()) + float(p.double().abs().sum()) for p in self.target.parameters())


def target_std(state: JepaState, pc: FeaturizedPointCloud) -> float:
    """Smallest per-dimension standard deviation of target-encoder outputs."""
    with torch.no_grad():
        z = encode(pc, state.target)
    return float(z.double().std(dim=0).min())


def pretrain_step(batch, state: JepaState, rng: np.random.Generator, cfg: PretrainConfig | None = None,
                  lr: float | None = None, momentum: float | None = None) -> float:
    """One optimizer step of masked latent prediction over a list of clouds.

    Returns the batch loss (NaN if every scene was skipped).
    """
    cfg = cfg or PretrainConfig()
    lr = cfg.lr if lr is None else lr
    momentum = cfg.momentum if momentum is None else momentum
    dtype = next(state.encoder.parameters()).dtype
    losses = []
    for pc in batch:
        order = geom.serialize_order(pc, VoxelGridSpec.covering(pc.coords, state.encoder.cfg.serial_voxel))
        try:
            mask = make_mask(pc, order, cfg.mask, rng, cfg.ratio_range, cfg.block_range, cfg.fixed_size)
        except ValueError as err:
            log.warning("skipping scene: %s", err)
            continue
        vis = mask.visible
        if len(vis) == 0:
            log.warning("skipping scene: mask hides every point")
            continue
        coords, feats, valid = cloud_tensors(pc, dtype)
        with torch.no_grad():
            target = state.target(coords, feats, valid)[torch.from_numpy(mask.masked)]
        m_idx = torch.from_numpy(mask.masked)
        v_idx = torch.from_numpy(vis)
        ctx = state.encoder(coords[v_idx], feats[v_idx], valid[v_idx])
        pred = state.predictor(ctx, coords[v_idx], coords[m_idx])
        losses.append(jepa_loss(pred, target))
    if not losses:
        return float("nan")
    loss = torch.stack(losses).mean()
    state.store.zero_grad()
    loss.backward()
    adamw_step(state.store, lr=lr, weight_decay=cfg.weight_decay)
    ema_update(state.ema, state.encoder, momentum)
    state.step += 1
    return float(loss.detach())


def pretrain(clouds, state: JepaState, steps: int, batch_size: int = 4, seed: int = 0,
             cfg: PretrainConfig | None = None, on_step=None) -> list[float]:
    """Run ``steps`` pretraining steps cycling through a shuffled scene list."""
    rng = np.random.default_rng(seed)
    history = []
    order = rng.permutation(len(clouds))
    cursor = 0
    for step in range(steps):
        batch = []
        for _ in range(batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(clouds)), 0
            batch.append(clouds[order[cursor]])
            cursor += 1
        loss = pretrain_step(batch, state, rng, cfg)
        history.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return history


# ---------------------------------------------------------------------------
# point-wise probing
# ---------------------------------------------------------------------------

@dataclass
class Probe:
    net: nn.Module
    mean: torch.Tensor
    std: torch.Tensor

    def logits(self, feats, text) -> torch.Tensor:
        x = _probe_inputs(feats, text)
        return self.net((x - self.mean) / self.std).squeeze(-1)


class _ProbeNet(nn.Module):
    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def _probe_inputs(feats, text) -> torch.Tensor:
    f = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    t = torch.as_tensor(np.asarray(text), dtype=torch.float32)
    if t.ndim == 1:
        t = t.expand(f.shape[0], -1)
    return torch.cat([f, t], dim=1)


def train_pointwise_probe(point_feats, text_embedding, labels, hidden: int = 64, steps: int = 400,
                          lr: float = 1e-2, weight_decay: float = 1e-4, seed: int = 0) -> Probe:
    """Two-layer classifier on ``[point feature, text embedding]``.

    Full-batch, class-balanced binary cross-entropy. Inputs are detached
    arrays, so nothing upstream is ever updated.
    """
    y = torch.as_tensor(np.asarray(labels), dtype=torch.float32).reshape(-1)
    n_pos = float(y.sum())
    if n_pos < 1 or n_pos > len(y) - 1:
        raise ValueError("probe needs at least one positive and one negative label")
    x = _probe_inputs(point_feats, text_embedding)
    mean = x.mean(dim=0)
    std = x.std(dim=0).clamp_min(1e-6)
    xn = (x - mean) / std
    torch.manual_seed(seed)
    net = _ProbeNet(x.shape[1], hidden)
    store = ParamStore.from_modules(probe=net)
    w_pos = 0.5 / n_pos
    w_neg = 0.5 / (len(y) - n_pos)
    weight = torch.where(y > 0.5, torch.tensor(w_pos), torch.tensor(w_neg))
    for _ in range(steps):
        z = net(xn).squeeze(-1)
        loss = (weight * torch.nn.functional.softplus(-z * (2 * y - 1))).sum()
        store.zero_grad()
        loss.backward()
        adamw_step(store, lr=lr, weight_decay=weight_decay)
    return Probe(net, mean, std)


def probe_eval(probe: Probe, feats, text, labels) -> float:
    """Balanced accuracy (mean of true-positive and true-negative rates)."""
    y = np.asarray(labels).astype(bool).reshape(-1)
    with torch.no_grad():
        pred = (probe.logits(feats, text) > 0).numpy()
    rates = [np.mean(pred[y] == 1) if y.any() else np.nan, np.mean(pred[~y] == 0) if (~y).any() else np.nan]
    return float(np.nanmean(rates))
