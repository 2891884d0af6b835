"""Figures written next to the CLI's metric logs (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {"font.size": 9, "axes.titlesize": 10, "legend.fontsize": 8, "figure.dpi": 110}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(series: dict[str, list[float]], path, title: str = "loss", logy: bool = True) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, ys in series.items():
            ys = np.asarray(ys, dtype=float)
            ax.plot(np.arange(len(ys)), ys, lw=1.0, label=name)
        if logy and all(np.all(np.asarray(v, float)[np.isfinite(v)] > 0) for v in series.values()):
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def lr_schedule(epochs, enc, dec, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, dec, label="decoder")
        ax.plot(epochs, enc, label="encoder")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        ax.legend(frameon=False)
        return _save(fig, path)


def accuracy_bars(report, path) -> Path:
    names = ["all"] + sorted(report.per_template)
    a25 = [report.acc_at_25] + [report.per_template[t]["acc@25"] for t in names[1:]]
    a50 = [report.acc_at_50] + [report.per_template[t]["acc@50"] for t in names[1:]]
    x = np.arange(len(names))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(x - 0.2, a25, 0.4, label="Acc@25")
        ax.bar(x + 0.2, a50, 0.4, label="Acc@50")
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def iou_histogram(ious, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(np.asarray(ious, dtype=float), bins=np.linspace(0, 1, 21), color="0.4")
        for t in (0.25, 0.5):
            ax.axvline(t, ls="--", lw=0.8, color="C3")
        ax.set_xlabel("IoU of selected box")
        ax.set_ylabel("samples")
        return _save(fig, path)


def topdown(coords, colors, path, title: str = "") -> Path:
    """Bird's-eye scatter; ``colors`` is (N, 3) in [0, 1] or a per-point scalar."""
    coords = np.asarray(coords)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(coords[:, 0], coords[:, 1], c=colors, s=2, linewidths=0)
        ax.set_aspect("equal")
        ax.set_title(title)
        return _save(fig, path)
