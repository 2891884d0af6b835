"""Model construction, checkpoint round-trips and the relational probing benchmark."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import RELATIONAL, Scene, SceneSample, target_object, text_onehot
from .decoder import Decoder, DecoderConfig, LocalizationModel
from .geom import FeaturizedPointCloud
from .jepa import EncoderConfig, PointEncoder, encode, probe_eval, train_pointwise_probe
from .nncore import load_checkpoint, save_checkpoint

HARMONIC_DIMS = 24
RGB_DIMS = 3


def semantic_dim_for(d_in: int) -> int:
    """Width of the class slice in generated features (0 for RGB-only clouds)."""
    return max(0, d_in - RGB_DIMS - HARMONIC_DIMS)


def build_model(d_in: int, enc_cfg: EncoderConfig | None, dec_cfg: DecoderConfig | None = None,
                encoder: PointEncoder | None = None, seed: int = 0) -> LocalizationModel:
    torch.manual_seed(seed)
    if encoder is None and enc_cfg is not None:
        encoder = PointEncoder(enc_cfg)
    d_latent = encoder.cfg.d_model if encoder is not None else d_in
    dec_cfg = dec_cfg or DecoderConfig()
    dec_cfg = DecoderConfig(**{**asdict(dec_cfg), "d_latent": d_latent})
    return LocalizationModel(encoder, Decoder(dec_cfg))


def save_encoder(path, encoder: PointEncoder, extra: dict | None = None) -> None:
    save_checkpoint(path, encoder.state_dict(), {"kind": "encoder", "enc": asdict(encoder.cfg), **(extra or {})})


def load_encoder(path) -> PointEncoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path}: not an encoder checkpoint")
    enc = PointEncoder(EncoderConfig(**meta["enc"]))
    enc.load_state_dict(tensors)
    return enc


def save_model(path, model: LocalizationModel, extra: dict | None = None) -> None:
    meta = {"kind": "model", "dec": asdict(model.decoder.cfg),
            "enc": asdict(model.encoder.cfg) if model.encoder is not None else None, **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> LocalizationModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    enc = PointEncoder(EncoderConfig(**meta["enc"])) if meta["enc"] else None
    model = LocalizationModel(enc, Decoder(DecoderConfig(**meta["dec"])))
    model.load_state_dict(tensors)
    return model


# ---------------------------------------------------------------------------
# relational probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeItem:
    """Points of every object sharing the target's class; label marks the target."""

    scene_id: int
    idx: np.ndarray
    labels: np.ndarray
    text: np.ndarray


def relational_probe_items(scenes: list[Scene], samples: list[SceneSample]) -> list[ProbeItem]:
    by_id = {s.scene_id: s for s in scenes}
    items = []
    for smp in samples:
        if smp.template not in RELATIONAL:
            continue
        scene = by_id[smp.scene_id]
        k = target_object(scene, smp)
        same = [j for j, o in enumerate(scene.objects) if o.cls == scene.objects[k].cls]
        idx = np.flatnonzero(np.isin(scene.labels, same))
        items.append(ProbeItem(smp.scene_id, idx, scene.labels[idx] == k,
                               text_onehot(smp.query_tokens).reshape(-1)))
    return items


def _stack(items, feats_by_scene):
    x = np.concatenate([feats_by_scene[it.scene_id][it.idx] for it in items])
    t = np.concatenate([np.repeat(it.text[None], len(it.idx), axis=0) for it in items])
    y = np.concatenate([it.labels for it in items])
    return x, t, y


def probe_accuracy(items_train, items_test, feats_by_scene, seed: int = 0, hidden: int = 64,
                   steps: int = 400, lr: float = 1e-2) -> float:
    """Balanced accuracy on held-out items of a probe fitted on training items."""
    x, t, y = _stack(items_train, feats_by_scene)
    probe = train_pointwise_probe(x, t, y, hidden=hidden, steps=steps, lr=lr, seed=seed)
    xt, tt, yt = _stack(items_test, feats_by_scene)
    return probe_eval(probe, xt, tt, yt)


@torch.no_grad()
def latent_features(scenes: list[Scene], encoder: PointEncoder) -> dict[int, np.ndarray]:
    encoder.eval()
    return {s.scene_id: encode(s.pc, encoder).double().numpy() for s in scenes}


def raw_features(scenes: list[Scene]) -> dict[int, np.ndarray]:
    return {s.scene_id: np.asarray(s.pc.feats, dtype=np.float64) for s in scenes}


def split_by_scene(items: list[ProbeItem], train_frac: float = 0.5):
    ids = sorted({it.scene_id for it in items})
    cut = max(1, int(round(len(ids) * train_frac)))
    train_ids = set(ids[:cut])
    return [it for it in items if it.scene_id in train_ids], [it for it in items if it.scene_id not in train_ids]
