"""Command-line entry point: ``rfx3d <subcommand> [--config F] [--seed N] [--set k=v ...] [--out DIR]``.

Every run prints the resolved configuration and seed, then its metrics, as
``key<TAB>value`` lines; the same lines go to ``<out>/metrics.tsv`` and
figures are rendered into ``<out>``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .bench import (
    build_model,
    latent_features,
    load_encoder,
    load_model,
    probe_accuracy,
    raw_features,
    relational_probe_items,
    save_encoder,
    save_model,
    semantic_dim_for,
    split_by_scene,
)
from .data import SceneConfig, generate_dataset, ingest_external_features, read_dataset, unique_clouds, write_dataset
from .data import write_features, write_pointcloud
from .decoder import DecoderConfig
from .evalcli import (
    ConfigError,
    RunConfig,
    evaluate,
    evaluate_boxes,
    pca_export,
    read_predictions,
    write_colored_cloud,
)
from .geom import VoxelGridSpec, harmonic_encode, unproject, voxelize
from .jepa import EncoderConfig, JepaState, encode, PretrainConfig, pretrain, target_std
from .training import StageSchedule, eval_copy, fit, stagewise_lr

COMMANDS = ("gen", "preprocess", "pretrain", "train", "eval", "probe", "export-pca", "grad-check")


class MetricLog:
    """Ordered ``key<TAB>value`` lines mirrored to stdout and a file."""

    def __init__(self, out: Path | None):
        self.out = out
        self.lines: list[str] = []

    def put(self, key: str, value) -> None:
        if isinstance(value, float):
            value = f"{value:.6f}"
        line = f"{key}\t{value}"
        self.lines.append(line)
        print(line, flush=True)

    def close(self) -> None:
        if self.out is not None:
            (self.out / "metrics.tsv").write_text("\n".join(self.lines) + "\n")


def scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(points_per_object=(cfg["data.points_min"], cfg["data.points_max"]),
                       voxel_size=cfg["data.voxel_size"], noise=cfg["data.noise"],
                       invalid_frac=cfg["data.invalid_frac"], features=cfg["data.features"], seed=cfg.seed)


def generated(cfg: RunConfig):
    return generate_dataset(scene_config(cfg), cfg["data.n_scenes"], cfg["data.queries_per_scene"],
                            seed=cfg.seed, first_id=cfg["data.first_id"])


def load_samples(cfg: RunConfig):
    if cfg["data.dir"]:
        return read_dataset(cfg["data.dir"])
    return generated(cfg)[1]


def encoder_config(cfg: RunConfig, d_in: int) -> EncoderConfig:
    return EncoderConfig(d_in=d_in, d_model=cfg["enc.d_model"], heads=cfg["enc.heads"], layers=cfg["enc.layers"],
                         group_size=cfg["enc.group_size"], semantic_dim=semantic_dim_for(d_in),
                         shift_groups=cfg["enc.shift_groups"])


def decoder_config(cfg: RunConfig) -> DecoderConfig:
    return DecoderConfig(d_model=cfg["dec.d_model"], n_blocks=cfg["dec.blocks"], n_queries=cfg["dec.queries"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg, out, log):
    scenes, samples = generated(cfg)
    log.put("n_scenes", len(scenes))
    log.put("n_samples", len(samples))
    for t in ("attribute", "nearest", "between"):
        log.put(f"templates.{t}", sum(s.template == t for s in samples))
    log.put("mean_points", float(np.mean([len(s.pc) for s in scenes])))
    if out is not None:
        write_dataset(samples, out / "data")
        if cfg["plots"] and samples:
            s = samples[0]
            plotting.topdown(s.pc.coords, s.gt_mask.astype(float), out / "sample0.png", s.text)


def cmd_preprocess(cfg, out, log):
    path = cfg["preprocess.capture"]
    if not path:
        raise ConfigError("preprocess needs preprocess.capture = <npz with depth, intrinsics[, poses, rgb, feats]>")
    cap = np.load(path)
    depth = cap["depth"]
    depth = depth[None] if depth.ndim == 2 else depth
    poses = cap["poses"] if "poses" in cap else np.repeat(np.eye(4)[None], len(depth), axis=0)
    pts, cols = [], []
    rgb_at = None
    for f in range(len(depth)):
        p, pix = unproject(depth[f], cap["intrinsics"], poses[f], return_pixels=True)
        parts = []
        for key in ("feats", "rgb"):
            if key in cap:
                img = np.asarray(cap[key][f] if cap[key].ndim == depth.ndim + 1 else cap[key], dtype=np.float64)
                if key == "rgb":
                    rgb_at = sum(q.shape[1] for q in parts)
                parts.append(img.reshape(-1, img.shape[-1])[pix])
        pts.append(p)
        cols.append(np.concatenate(parts, axis=1) if parts else np.zeros((len(p), 0)))
    pts = np.concatenate(pts)
    feats = np.concatenate(cols)
    feats = np.concatenate([feats, harmonic_encode(pts)], axis=1)
    valid = np.all(np.isfinite(feats), axis=1)
    feats = np.where(np.isfinite(feats), feats, 0.0)
    pc = voxelize(pts, feats, VoxelGridSpec.covering(pts, cfg["data.voxel_size"]), valid)
    log.put("frames", len(depth))
    log.put("points", len(pts))
    log.put("voxels", len(pc))
    log.put("feature_dim", pc.dim)
    if out is not None:
        write_pointcloud(pc.coords, out / "cloud.xyz")
        write_features(pc.feats, pc.valid, out / "features.bin")
        if cfg["plots"]:
            rgb = pc.coords[:, 2] if rgb_at is None else np.clip(pc.feats[:, rgb_at:rgb_at + 3], 0, 1)
            plotting.topdown(pc.coords, rgb, out / "cloud.png", "voxelized capture")


def cmd_pretrain(cfg, out, log):
    clouds = unique_clouds(load_samples(cfg))
    d_in = clouds[0].dim
    state = JepaState.create(encoder_config(cfg, d_in), seed=cfg.seed, momentum=cfg["pretrain.momentum"])
    pcfg = PretrainConfig(mask=cfg["pretrain.mask"], ratio_range=(cfg["pretrain.ratio_min"], cfg["pretrain.ratio_max"]),
                          lr=cfg["pretrain.lr"], momentum=cfg["pretrain.momentum"])
    hist = pretrain(clouds, state, cfg["pretrain.steps"], cfg["pretrain.batch_size"], seed=cfg.seed, cfg=pcfg,
                    on_step=lambda i, l: log.put(f"step{i:05d}.loss", float(l)))
    log.put("loss.first", float(hist[0]))
    log.put("loss.last", float(hist[-1]))
    log.put("target_std.min", float(min(target_std(state, pc) for pc in clouds[:4])))
    if out is not None:
        save_encoder(out / "encoder.ckpt", state.target, {"seed": cfg.seed})
        if cfg["plots"]:
            plotting.loss_curves({"latent prediction": hist}, out / "pretrain_loss.png", "pretraining loss")


def _model_for_training(cfg, d_in):
    kind = cfg["train.encoder"]
    if kind == "none":
        return build_model(d_in, None, decoder_config(cfg), seed=cfg.seed)
    if kind == "jepa":
        if not cfg["train.init"]:
            raise ConfigError("train.encoder = jepa needs train.init = <encoder checkpoint>")
        enc = load_encoder(cfg["train.init"])
        return build_model(d_in, None, decoder_config(cfg), encoder=enc, seed=cfg.seed)
    return build_model(d_in, encoder_config(cfg, d_in), decoder_config(cfg), seed=cfg.seed)


def cmd_train(cfg, out, log):
    samples = load_samples(cfg)
    model = _model_for_training(cfg, samples[0].pc.dim)
    epochs = cfg["train.epochs"]

    def on_step(step, m):
        if step % max(1, len(samples) // cfg["train.batch_size"]) == 0:
            log.put(f"step{step:05d}.epoch", float(m["epoch"]))
            for k in ("loss", "dice", "mask_ce", "box_l1", "giou", "align", "encoder_lr", "decoder_lr"):
                log.put(f"step{step:05d}.{k}", float(m[k]))

    state, hist = fit(model, samples, epochs, cfg["train.lr"], cfg["train.batch_size"], seed=cfg.seed,
                      ema_momentum=cfg["train.ema"], clip=cfg["train.clip"], on_step=on_step)
    log.put("steps", state.step)
    log.put("skipped", state.skipped)
    log.put("loss.last", float(hist[-1]["loss"]))
    ema_model = eval_copy(model, state)
    report = evaluate(ema_model, samples)
    log.put("train.acc@25", f"{report.acc_at_25:.3f}")
    if out is not None:
        save_model(out / "model.ckpt", ema_model, {"seed": cfg.seed})
        if cfg["plots"]:
            plotting.loss_curves({"total": [h["loss"] for h in hist]}, out / "train_loss.png", "fine-tuning loss")
            sched = StageSchedule().scaled(epochs)
            ep = np.linspace(0, epochs, 200, endpoint=False)
            lrs = np.array([stagewise_lr(e, cfg["train.lr"], sched) for e in ep])
            plotting.lr_schedule(ep, lrs[:, 0], lrs[:, 1], out / "lr_schedule.png")


def cmd_eval(cfg, out, log):
    samples = load_samples(cfg)
    if cfg["eval.predictions"]:
        report = evaluate_boxes(read_predictions(cfg["eval.predictions"]), samples)
    else:
        if not cfg["eval.model"]:
            raise ConfigError("eval needs eval.model = <model checkpoint> or eval.predictions = <tsv>")
        report = evaluate(load_model(cfg["eval.model"]), samples, box_source=cfg["eval.box"],
                          rule=cfg["eval.select"], eps=cfg["dbscan.eps"], min_pts=cfg["dbscan.min_pts"])
    for k, v in report.lines():
        log.put(k, v)
    if out is not None and cfg["plots"]:
        plotting.accuracy_bars(report, out / "accuracy.png")
        plotting.iou_histogram(report.ious, out / "iou_hist.png")


def cmd_probe(cfg, out, log):
    scenes, samples = generated(cfg)
    items = relational_probe_items(scenes, samples)
    if len({it.scene_id for it in items}) < 2:
        raise ConfigError("probe needs relational queries from at least two scenes; raise data.n_scenes")
    train, test = split_by_scene(items, cfg["probe.train_frac"])
    kw = dict(seed=cfg.seed, hidden=cfg["probe.hidden"], steps=cfg["probe.steps"], lr=cfg["probe.lr"])
    log.put("items.train", len(train))
    log.put("items.test", len(test))
    log.put("raw.balanced_acc", probe_accuracy(train, test, raw_features(scenes), **kw))
    if cfg["probe.encoder"]:
        enc = load_encoder(cfg["probe.encoder"])
        log.put("latent.balanced_acc", probe_accuracy(train, test, latent_features(scenes, enc), **kw))


def cmd_export_pca(cfg, out, log):
    if cfg["pca.cloud"]:
        pc = ingest_external_features(cfg["pca.cloud"], cfg["pca.features"])
    else:
        pc = load_samples(cfg)[0].pc
    feats = pc.feats
    if cfg["probe.encoder"]:
        enc = load_encoder(cfg["probe.encoder"]).eval()
        with torch.no_grad():
            feats = encode(pc, enc).double().numpy()
    res = pca_export(feats, cfg["pca.k"], seed=cfg.seed)
    log.put("points", len(pc))
    for i, f in enumerate(res.explained):
        log.put(f"explained.{i}", float(f))
    if out is not None:
        rgb = np.zeros((len(pc), 3))
        rgb[:, : min(3, res.projection.shape[1])] = res.projection[:, :3]
        write_colored_cloud(pc.coords, rgb, out / "pca_cloud.txt")
        if cfg["plots"]:
            plotting.topdown(pc.coords, rgb, out / "pca.png", "feature PCA")


def cmd_grad_check(cfg, out, log):
    from .gradcheck import run_all

    ok = True
    for name, err in run_all(eps=cfg["gradcheck.eps"], seed=cfg.seed):
        log.put(f"rel_err.{name}", f"{err:.3e}")
        ok &= err < cfg["gradcheck.tol"]
    log.put("pass", str(ok).lower())
    return 0 if ok else 1


HANDLERS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "probe": cmd_probe, "export-pca": cmd_export_pca, "grad-check": cmd_grad_check}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfx3d", description="Referring-expression localization on point clouds.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="file of 'key = value' lines")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory for metrics, figures and checkpoints")
    return p


def main(argv=None) -> int:
    p = parser()
    args = p.parse_args(argv)
    try:
        cfg = RunConfig.resolve(args.config, args.set, args.seed)
    except ConfigError as err:
        p.print_usage(sys.stderr)
        print(f"rfx3d: error: {err}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed % 2 ** 63)
    torch.set_num_threads(1)
    log = MetricLog(out)
    log.put("command", args.command)
    for k, v in cfg.lines():
        log.put(k, v)
    try:
        status = HANDLERS[args.command](cfg, out, log) or 0
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"rfx3d: error: {err}", file=sys.stderr)
        status = 1
    log.close()
    return status


if __name__ == "__main__":
    sys.exit(main())
