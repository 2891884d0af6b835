import numpy as np
import pytest
import torch

from rfx3d.data import SceneConfig, generate_dataset
from rfx3d.decoder import Decoder, DecoderBlock, DecoderConfig, LocalizationModel
from rfx3d.geom import Box3, iou3
from rfx3d.training import composite_loss, fit, hungarian, matching_cost

CFG = DecoderConfig(d_latent=7, d_model=24, n_blocks=3, n_queries=5, d_text=6, heads=2, max_tokens=8)


def make_decoder(cfg=CFG, seed=0):
    torch.manual_seed(seed)
    return Decoder(cfg).double()


def inputs(n=30, t=4, seed=0, cfg=CFG):
    g = torch.Generator().manual_seed(seed)
    lat = torch.randn(n, cfg.d_latent, generator=g, dtype=torch.float64)
    coords = torch.rand(n, 3, generator=g, dtype=torch.float64) * 3
    text = torch.randn(t, cfg.d_text, generator=g, dtype=torch.float64)
    return lat, coords, text


def test_config_divisibility():
    with pytest.raises(ValueError):
        DecoderConfig(d_model=20, heads=4)
    with pytest.raises(ValueError):
        DecoderConfig(d_model=36, heads=8)


def test_embed_inputs_shapes_and_position():
    dec = make_decoder()
    lat, coords, text = inputs(n=2)
    lat = lat[:1].expand(2, -1)
    points, queries = dec.embed_inputs(lat, coords, text)
    assert points.shape == (2, 24)
    assert queries.shape == (CFG.n_queries + 4, 24)
    assert not torch.allclose(points[0], points[1])
    with pytest.raises(ValueError):
        dec.embed_inputs(lat, coords, torch.zeros(0, CFG.d_text, dtype=torch.float64))
    with pytest.raises(ValueError):
        dec.embed_inputs(lat, coords, torch.zeros(9, CFG.d_text, dtype=torch.float64))


def test_block_with_all_attention_masked_is_mlp_path():
    torch.manual_seed(0)
    blk = DecoderBlock(CFG).double()
    p = torch.randn(6, 24, dtype=torch.float64)
    q = torch.randn(4, 24, dtype=torch.float64)
    p2, q2 = blk(p, q, block_attention=True)
    assert torch.isfinite(p2).all() and torch.isfinite(q2).all()
    # attention contributes only its output-projection bias
    qe = q + blk.self_attn.o.bias + blk.query_attn.o.bias
    qe = qe + blk.query_mlp(blk.norm_qm(qe))
    pe = p + blk.point_attn.o.bias
    pe = pe + blk.point_mlp(blk.norm_pm(pe))
    torch.testing.assert_close(q2, qe)
    torch.testing.assert_close(p2, pe)


def test_blocks_update_point_features():
    dec = make_decoder()
    lat, coords, text = inputs()
    p0, q0 = dec.embed_inputs(lat, coords, text)
    p1, _ = dec.blocks[0](p0, q0)
    assert not torch.allclose(p0, p1)


def test_mask_head_dot_product_semantics():
    dec = make_decoder()
    q = torch.randn(3, 24, dtype=torch.float64)
    m = dec.mask_mlp(q).detach()
    # a point orthogonal to every query projection gets zero logits
    basis = torch.linalg.svd(m, full_matrices=True).Vh
    ortho = basis[3:5]
    points = torch.cat([ortho, ortho[:1]], 0)
    logits = dec.mask_head(q, points)
    assert logits.shape == (3, 3)
    torch.testing.assert_close(logits[:, :2], torch.zeros(3, 2, dtype=torch.float64), atol=1e-10, rtol=0)
    assert torch.equal(logits[:, 0], logits[:, 2])


def test_output_contracts():
    dec = make_decoder()
    lat, coords, text = inputs(n=40, t=5)
    outs = dec(lat, coords, text)
    assert len(outs) == CFG.n_blocks
    lo, hi = coords.min(0).values, coords.max(0).values
    for o in outs:
        assert o.mask_logits.shape == (CFG.n_queries, 40)
        assert o.boxes.shape == (CFG.n_queries, 6)
        assert o.align_logits.shape == (CFG.n_queries, 6)
        assert (o.boxes[:, 3:] > 0).all()
        assert ((o.boxes[:, :3] >= lo) & (o.boxes[:, :3] <= hi)).all()
        torch.testing.assert_close(torch.softmax(o.align_logits, -1).sum(-1), torch.ones(CFG.n_queries, dtype=torch.float64))
        for t in o:
            assert torch.isfinite(t).all()


def test_untrained_align_argmax_spreads_over_columns():
    counts = np.zeros(5)
    for seed in range(60):
        dec = make_decoder(seed=seed)
        lat, coords, text = inputs(n=20, t=4, seed=seed)
        with torch.no_grad():
            out = dec(lat, coords, text)[-1]
        counts += np.bincount(out.align_logits.argmax(1).numpy(), minlength=5)
    frac = counts / counts.sum()
    assert frac.min() > 0.05  # every column, including "no text", gets picked


def test_outputs_deterministic_and_point_equivariant():
    dec = make_decoder()
    lat, coords, text = inputs(n=25)
    a = dec(lat, coords, text)
    b = dec(lat, coords, text)
    for x, y in zip(a, b):
        for s, t in zip(x, y):
            assert torch.equal(s, t)
    perm = torch.randperm(25, generator=torch.Generator().manual_seed(3))
    c = dec(lat[perm], coords[perm], text)
    for x, y in zip(a, c):
        torch.testing.assert_close(y.mask_logits, x.mask_logits[:, perm], rtol=1e-10, atol=1e-10)
        torch.testing.assert_close(y.boxes, x.boxes, rtol=1e-10, atol=1e-10)
        torch.testing.assert_close(y.align_logits, x.align_logits, rtol=1e-10, atol=1e-10)


def test_finite_for_extreme_inputs():
    dec = make_decoder()
    lat, coords, text = inputs()
    outs = dec(lat * 1e3, coords * 1e3, text * 1e3)
    for o in outs:
        for t in o:
            assert torch.isfinite(t).all()


def small_samples(n_scenes=1, per_scene=1, seed=0):
    cfg = SceneConfig(points_per_object=(25, 40), n_objects=(3, 4), seed=seed)
    return generate_dataset(cfg, n_scenes, per_scene, seed=seed)[1]


def test_every_parameter_receives_gradient():
    s = small_samples()[0]
    torch.manual_seed(0)
    model = LocalizationModel(None, Decoder(DecoderConfig(d_latent=s.pc.dim, d_model=24, heads=2, n_queries=4)))
    total, _ = composite_loss(model(s), s.objects)
    total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    # text rows for words absent from the query legitimately receive no gradient
    assert dead == [] or dead == ["text.table"]
    used = torch.as_tensor(sorted(set(s.query_tokens)))
    assert torch.all(model.text.table.grad[used].abs().sum(1) > 0)


def test_overfit_one_sample_box_and_alignment():
    s = small_samples(seed=1)[0]
    torch.manual_seed(0)
    model = LocalizationModel(None, Decoder(DecoderConfig(d_latent=s.pc.dim, d_model=48, heads=4, n_blocks=2, n_queries=4)))
    state, _ = fit(model, [s], epochs=300, base_lr=2e-3, ema_momentum=0.0)
    with torch.no_grad():
        out = model(s)[-1]
    a = hungarian(matching_cost(out, s.objects))
    q = dict((g, qq) for qq, g in a.pairs)[0]
    box = Box3.from_array(out.boxes[q].numpy())
    assert iou3(box, s.gt_box) >= 0.9
    start, end = s.target_span
    assert start <= int(out.align_logits[q].argmax()) < end
