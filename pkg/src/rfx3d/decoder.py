"""Language-conditioned mask and box decoder.

Point features and a query sequence (learned object queries followed by the
projected text tokens) are refined by a stack of blocks; after every block
three heads read the object queries: per-point mask logits, a box, and an
alignment distribution over text tokens plus a trailing "no text" column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .data import VOCAB
from .nncore import LayerNorm, Linear, Mlp, MultiHeadAttention, token_param

BOX_SIZE_EPS = 1e-3


@dataclass
class DecoderConfig:
    d_latent: int = 48
    d_model: int = 96
    n_blocks: int = 3
    n_queries: int = 16
    d_text: int = 32
    heads: int = 4
    max_tokens: int = 16
    vocab_size: int = len(VOCAB)
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d_model % self.heads or self.d_model % 6:
            raise ValueError("decoder d_model must be divisible by the head count and by 6")


class DecoderOutput(NamedTuple):
    mask_logits: torch.Tensor  # (Q, N)
    boxes: torch.Tensor  # (Q, 6) center + size
    align_logits: torch.Tensor  # (Q, T + 1), last column = no text


def scene_frame(coords):
    lo = coords.min(dim=0).values
    hi = coords.max(dim=0).values
    return lo, torch.clamp(hi - lo, min=1e-6)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d, h, r = cfg.d_model, cfg.heads, cfg.mlp_ratio
        self.norm_sa = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, h)
        self.norm_q = LayerNorm(d)
        self.norm_p = LayerNorm(d)
        self.query_attn = MultiHeadAttention(d, h)
        self.norm_qm = LayerNorm(d)
        self.query_mlp = Mlp(d, r * d)
        self.norm_pu = LayerNorm(d)
        self.norm_pk = LayerNorm(d)
        self.point_attn = MultiHeadAttention(d, h)
        self.norm_pm = LayerNorm(d)
        self.point_mlp = Mlp(d, r * d)

    def forward(self, points, queries, block_attention: bool = False):
        """``block_attention`` masks every key (debug path): attention outputs
        become zero and only the projection biases and MLPs act."""
        mq = mp = mqq = None
        if block_attention:
            ninf = float("-inf")
            nq, npt = queries.shape[0], points.shape[0]
            mq = torch.full((nq, nq), ninf, dtype=queries.dtype)
            mp = torch.full((nq, npt), ninf, dtype=queries.dtype)
            mqq = torch.full((npt, nq), ninf, dtype=queries.dtype)
        queries = queries + self.self_attn(self.norm_sa(queries), mask=mq)
        queries = queries + self.query_attn(self.norm_q(queries), self.norm_p(points), mask=mp)
        queries = queries + self.query_mlp(self.norm_qm(queries))
        points = points + self.point_attn(self.norm_pu(points), self.norm_pk(queries), mask=mqq)
        points = points + self.point_mlp(self.norm_pm(points))
        return points, queries


class BoxHead(nn.Module):
    """Queries cross-attend to point features concatenated with projected coordinates."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.coord_proj = Linear(3, d // 2)
        self.query_proj = Linear(d, d)
        self.attn = MultiHeadAttention(d, cfg.heads, d_kv=d + d // 2)
        self.mlp = Mlp(d, d, 6)

    def forward(self, queries, points, coords):
        lo, ext = scene_frame(coords)
        unit = (coords - lo) / ext
        kv = torch.cat([points, self.coord_proj(unit)], dim=-1)
        h = self.attn(self.query_proj(queries), kv)
        raw = self.mlp(h)
        center = lo + ext * torch.sigmoid(raw[:, :3])
        size = torch.nn.functional.softplus(raw[:, 3:]) + BOX_SIZE_EPS
        return torch.cat([center, size], dim=-1)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.point_proj = Linear(cfg.d_latent, d)
        self.pos_mlp = Mlp(3, d, d)
        self.text_proj = Linear(cfg.d_text, d)
        self.text_pos = token_param(cfg.max_tokens, d)
        self.queries = token_param(cfg.n_queries, d)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_blocks))
        self.head_norm_q = LayerNorm(d)
        self.head_norm_p = LayerNorm(d)
        self.mask_mlp = Mlp(d, d, d)
        self.box_head = BoxHead(cfg)
        self.align_mlp = Mlp(d, d, cfg.max_tokens + 1)

    def embed_inputs(self, latents, coords, text_feats):
        if latents.shape[0] < 1 or text_feats.shape[0] < 1:
            raise ValueError("decoder needs at least one point and one text token")
        t = text_feats.shape[0]
        if t > self.cfg.max_tokens:
            raise ValueError(f"query has {t} tokens, decoder supports at most {self.cfg.max_tokens}")
        lo, ext = scene_frame(coords)
        points = self.point_proj(latents) + self.pos_mlp((coords - lo) / ext)
        text = self.text_proj(text_feats) + self.text_pos[:t].to(latents.dtype)
        queries = torch.cat([self.queries.to(latents.dtype), text], dim=0)
        return points, queries

    def mask_head(self, queries, points):
        return self.mask_mlp(queries) @ points.transpose(0, 1)

    def align_head(self, queries, n_tokens: int):
        logits = self.align_mlp(queries)
        return torch.cat([logits[:, :n_tokens], logits[:, -1:]], dim=1)

    def heads(self, points, queries, coords, n_tokens: int) -> DecoderOutput:
        q = self.head_norm_q(queries[: self.cfg.n_queries])
        p = self.head_norm_p(points)
        return DecoderOutput(self.mask_head(q, p), self.box_head(q, p, coords), self.align_head(q, n_tokens))

    def forward(self, latents, coords, text_feats) -> list[DecoderOutput]:
        points, queries = self.embed_inputs(latents, coords, text_feats)
        outs = []
        for blk in self.blocks:
            points, queries = blk(points, queries)
            outs.append(self.heads(points, queries, coords, text_feats.shape[0]))
        return outs


class TextTable(nn.Module):
    """Learned per-word embeddings over the closed vocabulary."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.table = token_param(vocab_size, dim)

    def forward(self, tokens):
        return self.table[torch.as_tensor(tokens, dtype=torch.long)]


class LocalizationModel(nn.Module):
    """Encoder + text table + decoder. ``encoder=None`` feeds raw features straight to the decoder."""

    def __init__(self, encoder: nn.Module | None, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.text = TextTable(decoder.cfg.vocab_size, decoder.cfg.d_text)

    @property
    def dtype(self):
        return self.decoder.queries.dtype

    def latents(self, pc):
        dt = self.dtype
        coords = torch.as_tensor(pc.coords, dtype=dt)
        feats = torch.as_tensor(pc.feats, dtype=dt)
        if self.encoder is None:
            return feats
        return self.encoder(coords, feats, torch.as_tensor(pc.valid, dtype=torch.bool))

    def forward(self, sample, text_feats=None, latents=None) -> list[DecoderOutput]:
        dt = self.dtype
        coords = torch.as_tensor(sample.pc.coords, dtype=dt)
        if latents is None:
            latents = self.latents(sample.pc)
        if text_feats is None:
            text_feats = self.text(sample.query_tokens)
        else:
            text_feats = torch.as_tensor(np.asarray(text_feats), dtype=dt)
        return self.decoder(latents, coords, text_feats)

    def param_groups(self) -> dict[str, nn.Module]:
        groups = {"decoder": self.decoder, "text": self.text}
        if self.encoder is not None:
            groups["encoder"] = self.encoder
        return groups
