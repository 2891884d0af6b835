"""Finite-difference harness over the differentiable building blocks."""

from __future__ import annotations

import numpy as np
import torch

from . import nncore as F
from .data import GroundTruth
from .decoder import Decoder, DecoderConfig, DecoderOutput
from .geom import Box3
from .training import composite_loss, dice_loss, focal_align_loss, giou_pairwise, mask_ce_loss

OP_TOL = 1e-4
E2E_TOL = 1e-3


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def op_cases(seed: int = 0):
    """(name, fn, inputs, wrt) for every primitive op."""
    g = torch.Generator().manual_seed(seed)
    x = _rand(g, 5, 8)
    w1, b1, w2, b2 = _rand(g, 12, 8), _rand(g, 12), _rand(g, 8, 12), _rand(g, 8)
    q, k, v = _rand(g, 2, 5, 6), _rand(g, 2, 7, 6), _rand(g, 2, 7, 6)
    mask = torch.zeros(5, 7, dtype=torch.float64)
    mask[0, 3:] = float("-inf")
    mask[2, :2] = float("-inf")
    coords = _rand(g, 5, 3)
    sparse = F.block_sparse_mask(3, 2, 1)
    qs, ks, vs = _rand(g, 6, 6), _rand(g, 6, 6), _rand(g, 6, 6)
    logits = _rand(g, 9)
    gt = (torch.rand(9, generator=g) > 0.5).double()
    align = _rand(g, 4, 5)
    boxes_a = torch.cat([_rand(g, 3, 3), torch.rand(3, 3, generator=g, dtype=torch.float64) + 0.5], 1)
    boxes_b = boxes_a + 0.2 * _rand(g, 3, 6)
    return [
        ("linear", F.linear, [x, w1, b1], None),
        ("layernorm", F.layernorm, [x, _rand(g, 8), _rand(g, 8)], None),
        ("gelu", F.gelu, [x], None),
        ("gelu_mlp", F.gelu_mlp, [x, w1, b1, w2, b2], None),
        ("attention", lambda a, b, c: F.attention(a, b, c, mask), [q, k, v], None),
        ("attention_block_sparse", lambda a, b, c: F.attention(a, b, c, sparse), [qs, ks, vs], None),
        ("rotary_xyz", lambda t, c: F.rotary_xyz(t, c), [_rand(g, 5, 12), coords], [0, 1]),
        ("dice_loss", lambda z: dice_loss(torch.sigmoid(z), gt), [logits], None),
        ("mask_ce_loss", lambda z: mask_ce_loss(z, gt), [logits], None),
        ("focal_align_loss", lambda z: focal_align_loss(z, torch.tensor([0, 4, 2, 4])), [align], None),
        ("giou", lambda a, b: giou_pairwise(a, b)[1], [boxes_a, boxes_b], None),
    ]


def check_ops(eps: float = 1e-6, seed: int = 0):
    return [(name, F.grad_check(fn, inputs, eps=eps, seed=seed, wrt=wrt)) for name, fn, inputs, wrt in op_cases(seed)]


def decoder_problem(seed: int = 0, n_points: int = 40, n_tokens: int = 5):
    """A 2-block decoder in double precision with a fixed scene and targets."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(d_latent=10, d_model=24, n_blocks=2, n_queries=4, d_text=8, heads=2, max_tokens=8)
    dec = Decoder(cfg).double()
    coords = torch.as_tensor(rng.uniform(0, 2, (n_points, 3)))
    latents = torch.as_tensor(rng.standard_normal((n_points, 10)))
    text = torch.as_tensor(rng.standard_normal((n_tokens, 8)))
    gts = []
    for span, sel in (((1, 2), coords[:, 0] < 0.8), ((3, 4), coords[:, 0] > 1.2)):
        m = sel.numpy()
        p = coords.numpy()[m]
        gts.append(GroundTruth(m, Box3.from_bounds(p.min(0), p.max(0)), span))
    return dec, latents, coords, text, gts


def check_decoder_end_to_end(eps: float = 1e-6, seed: int = 0) -> float:
    dec, latents, coords, text, gts = decoder_problem(seed)
    params = dict(dec.named_parameters())
    return F.grad_check_module(lambda: composite_loss(dec(latents, coords, text), gts)[0], params, eps=eps, seed=seed)


def run_all(eps: float = 1e-6, seed: int = 0):
    return check_ops(eps, seed) + [("decoder_end_to_end", check_decoder_end_to_end(eps, seed))]
