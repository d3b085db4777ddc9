"""Figures for evaluation reports and classification maps.

Rendered with the non-interactive Agg backend; each function writes one
file and closes its figure. SVG metadata dates are disabled so reruns
give identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .inference import UNCLASSIFIED, ClassificationMaps  # noqa: E402
from .metrics import CURVE_GRID, MetricsReport  # noqa: E402

plt.rcParams.update(
    {
        "figure.dpi": 100,
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "svg.hashsalt": "habmap",
        "svg.fonttype": "none",
    }
)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {"Software": None}
    fig.savefig(path, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def plot_pr_roc(report: MetricsReport, path, title: str = ""):
    """Micro and macro averaged PR and ROC curves side by side."""
    c = report.curves
    fig, (ax_pr, ax_roc) = plt.subplots(1, 2, figsize=(8, 3.6))
    if c.get("micro_pr"):
        pts = np.array(c["micro_pr"])
        ax_pr.step(pts[:, 1], pts[:, 2], where="post", label=f"micro (AP={c['micro_ap']:.3f})")
    if c.get("macro_pr"):
        ax_pr.plot(CURVE_GRID, c["macro_pr"], label="macro")
    ax_pr.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="precision-recall")
    if c.get("micro_roc"):
        pts = np.array([(0.0, 0.0)] + [p[1:] for p in c["micro_roc"]])
        ax_roc.plot(pts[:, 0], pts[:, 1], label=f"micro (AUC={c['micro_auc']:.3f})")
    if c.get("macro_roc"):
        ax_roc.plot(CURVE_GRID, c["macro_roc"], label="macro")
    ax_roc.plot([0, 1], [0, 1], ls=":", color="0.6", lw=0.8)
    ax_roc.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.02), title="ROC")
    for ax in (ax_pr, ax_roc):
        ax.legend(loc="lower right" if ax is ax_roc else "lower left", frameon=False)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_confusion(report: MetricsReport, class_codes: Sequence[str], path, title: str = ""):
    cm = np.asarray(report.confusion, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    K = len(cm)
    side = max(3.5, 0.3 * K + 1.5)
    fig, ax = plt.subplots(figsize=(side, side))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(K), class_codes, rotation=90)
    ax.set_yticks(range(K), class_codes)
    ax.set(xlabel="predicted", ylabel="true")
    if K <= 12:
        for i in range(K):
            for j in range(K):
                if cm[i, j]:
                    ax.text(j, i, int(cm[i, j]), ha="center", va="center", fontsize=7,
                            color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="row-normalized")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_fold_scores(scores: dict, folds: Sequence[int], path, ylabel: str = "weighted F1"):
    """Per-fold scores with mean and std error bars, one bar group per predictor."""
    keys = list(scores)
    means = [np.mean(scores[k]) for k in keys]
    stds = [np.std(scores[k]) for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(keys) + 2), 3.6))
    x = np.arange(len(keys))
    ax.bar(x, means, yerr=stds, color="0.8", capsize=3)
    for i, k in enumerate(keys):
        ax.scatter(np.full(len(scores[k]), i), scores[k], s=10, color="k", zorder=3)
    ax.set_xticks(x, keys, rotation=45, ha="right")
    ax.set(ylabel=ylabel, ylim=(0, 1), title=f"{len(folds)}-fold scores")
    return _save(fig, path)


def plot_class_map(maps: ClassificationMaps, class_codes: Sequence[str], path):
    K = maps.n_classes
    cmap = plt.get_cmap("tab20", max(K, 2))
    rgb = cmap(np.clip(maps.class_map, 0, K - 1) % cmap.N)
    rgb[maps.class_map == UNCLASSIFIED] = (1, 1, 1, 1)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap(k % cmap.N)) for k in range(K)]
    ax.legend(handles, class_codes, loc="upper left", bbox_to_anchor=(1.01, 1), frameon=False, fontsize=7)
    return _save(fig, path)


def plot_confidence(maps: ClassificationMaps, path):
    conf = np.where(maps.classified, maps.max_confidence, np.nan)
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(conf, vmin=0, vmax=1, cmap="viridis", interpolation="nearest")
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="max class probability")
    return _save(fig, path)
