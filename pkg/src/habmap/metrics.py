"""Multiclass evaluation: confusion matrices, averaged P/R/F1, top-k,
average precision, ROC-AUC, curves and cross-fold aggregation.

Conventions:
  * undefined per-class precision/recall counts as 0 and is flagged;
  * macro averages run over classes present in ``y_true`` or ``y_pred``;
  * AP uses step interpolation, ROC-AUC the trapezoidal rule;
  * argmax and top-k ties go to the lower class index.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AVERAGINGS = ("weighted", "macro", "micro")
CURVE_GRID = np.linspace(0.0, 1.0, 101)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise MetricsError(f"length mismatch: {len(t)} true vs {len(p)} predicted labels")
    for arr, what in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise MetricsError(f"{what} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return ConfusionMatrix(cm)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    support: np.ndarray
    undefined_precision: np.ndarray  # True where no sample was predicted as the class
    undefined_recall: np.ndarray  # True where the class has no support


def _f1(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def precision_recall_f1(cm: ConfusionMatrix, averaging: str = "weighted") -> PRF:
    if averaging not in AVERAGINGS:
        raise MetricsError(f"averaging must be one of {AVERAGINGS}")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    support = c.sum(axis=1)
    undef_p = predicted == 0
    undef_r = support == 0
    prec = np.divide(tp, predicted, out=np.zeros_like(tp), where=~undef_p)
    rec = np.divide(tp, support, out=np.zeros_like(tp), where=~undef_r)
    f1 = _f1(prec, rec)
    total = c.sum()
    if averaging == "micro":
        acc = float(tp.sum() / total) if total else 0.0
        P = R = F = acc
    elif averaging == "weighted":
        w = support / total if total else np.zeros_like(support)
        P, R, F = (float(np.sum(w * v)) for v in (prec, rec, f1))
    else:
        present = (support > 0) | (predicted > 0)
        if present.any():
            P, R, F = (float(v[present].mean()) for v in (prec, rec, f1))
        else:
            P = R = F = 0.0
    return PRF(P, R, F, prec, rec, f1, support.astype(np.int64), undef_p, undef_r)


def argmax_lowest(prob_rows) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index."""
    return np.argmax(np.asarray(prob_rows), axis=-1)


def topk_accuracy(prob_rows, y_true, k: int) -> float:
    P = np.asarray(prob_rows, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    N, K = P.shape
    if k > K or k < 1:
        raise MetricsError(f"k={k} outside [1, {K}]")
    if N == 0:
        return 0.0
    s_true = P[np.arange(N), y][:, None]
    idx = np.arange(K)[None, :]
    rank = ((P > s_true) | ((P == s_true) & (idx < y[:, None]))).sum(axis=1)
    return float(np.mean(rank < k))


# ----------------------------------------------------------- curve metrics


def _threshold_counts(scores, labels):
    """Cumulative TP/FP at each distinct score, highest first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).astype(bool).ravel()
    order = np.argsort(-s, kind="stable")
    s, l = s[order], l[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(l)[last].astype(np.float64)
    fp = np.cumsum(~l)[last].astype(np.float64)
    return s[last], tp, fp


def average_precision(scores, labels):
    """Step-interpolated AP and PR points ``(threshold, recall, precision)``.

    Returns ``(None, [])`` when there are no positive labels.
    """
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        return None, []
    thr, tp, fp = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    ap = float(np.sum((recall - prev) * precision))
    return ap, list(zip(thr.tolist(), recall.tolist(), precision.tolist()))


def roc_auc(scores, labels):
    """Trapezoidal ROC-AUC and ROC points ``(threshold, fpr, tpr)``.

    Returns ``(None, [])`` unless both classes are present.
    """
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None, []
    thr, tp, fp = _threshold_counts(scores, labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    pts = [(math.inf, 0.0, 0.0)] + list(zip(thr.tolist(), fpr[1:].tolist(), tpr[1:].tolist()))
    return auc, pts


def _pr_on_grid(points):
    """Precision at each recall grid value (best precision at recall >= r)."""
    rec = np.array([p[1] for p in points])
    prec = np.array([p[2] for p in points])
    # running max from the right gives the interpolated (monotone) PR envelope
    env = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(rec, CURVE_GRID, side="left")
    out = np.zeros_like(CURVE_GRID)
    ok = idx < len(rec)
    out[ok] = env[idx[ok]]
    return out


def _roc_on_grid(points):
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    return np.interp(CURVE_GRID, fpr, tpr)


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    n_classes: int
    n_samples: int
    per_class: dict  # precision/recall/f1/support lists, zero-division flags
    averaged: dict  # {averaging: {precision, recall, f1}}
    topk: dict  # {k: accuracy}
    ap: list  # per class, None when undefined
    roc_auc: list
    curves: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.topk[1]

    def scalars(self) -> dict[str, float]:
        """Flat scalar metrics, the unit of cross-fold aggregation."""
        out = {}
        for avg in AVERAGINGS:
            for m in ("precision", "recall", "f1"):
                out[f"{m}_{avg}"] = self.averaged[avg][m]
        for k, v in self.topk.items():
            out[f"top{k}_accuracy"] = v
        aps = [a for a in self.ap if a is not None]
        aucs = [a for a in self.roc_auc if a is not None]
        out["ap_macro"] = float(np.mean(aps)) if aps else 0.0
        out["roc_auc_macro"] = float(np.mean(aucs)) if aucs else 0.0
        out["ap_micro"] = self.curves.get("micro_ap") or 0.0
        out["roc_auc_micro"] = self.curves.get("micro_auc") or 0.0
        return out

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_samples": self.n_samples,
            "per_class": self.per_class,
            "averaged": self.averaged,
            "topk": {str(k): v for k, v in self.topk.items()},
            "ap": self.ap,
            "roc_auc": self.roc_auc,
            "confusion": self.confusion,
            "curves": self.curves,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["n_classes"],
            d["n_samples"],
            d["per_class"],
            d["averaged"],
            {int(k): v for k, v in d["topk"].items()},
            d["ap"],
            d["roc_auc"],
            d.get("curves", {}),
            d.get("confusion", []),
        )


def evaluate(prob_rows, y_true, n_classes: int | None = None, ks: Sequence[int] = (1, 3, 5)) -> MetricsReport:
    """Full report for predicted class distributions ``(N, K)``."""
    P = np.asarray(prob_rows, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    K = n_classes if n_classes is not None else P.shape[1]
    if P.ndim != 2 or P.shape[1] != K:
        raise MetricsError(f"probability rows must be (N, {K}), got {P.shape}")
    cm = confusion_matrix(y, argmax_lowest(P), K)
    averaged = {}
    per = None
    for avg in AVERAGINGS:
        r = precision_recall_f1(cm, avg)
        averaged[avg] = {"precision": r.precision, "recall": r.recall, "f1": r.f1}
        per = r
    per_class = {
        "precision": per.per_class_precision.tolist(),
        "recall": per.per_class_recall.tolist(),
        "f1": per.per_class_f1.tolist(),
        "support": per.support.tolist(),
        "undefined_precision": per.undefined_precision.tolist(),
        "undefined_recall": per.undefined_recall.tolist(),
    }
    topk = {k: topk_accuracy(P, y, k) for k in ks if k <= K}

    onehot = np.zeros_like(P, dtype=bool)
    if len(y):
        onehot[np.arange(len(y)), y] = True
    aps, aucs, pr_grid, roc_grid = [], [], [], []
    per_class_curves = {}
    for c in range(K):
        ap, pr_pts = average_precision(P[:, c], onehot[:, c])
        auc, roc_pts = roc_auc(P[:, c], onehot[:, c])
        aps.append(ap)
        aucs.append(auc)
        if pr_pts:
            pr_grid.append(_pr_on_grid(pr_pts))
        if roc_pts:
            roc_grid.append(_roc_on_grid(roc_pts))
        per_class_curves[str(c)] = {"pr": pr_pts, "roc": [p for p in roc_pts if math.isfinite(p[0])]}
    micro_ap, micro_pr = average_precision(P.ravel(), onehot.ravel())
    micro_auc, micro_roc = roc_auc(P.ravel(), onehot.ravel())
    curves = {
        "grid": CURVE_GRID.tolist(),
        "macro_pr": np.mean(pr_grid, axis=0).tolist() if pr_grid else [],
        "macro_roc": np.mean(roc_grid, axis=0).tolist() if roc_grid else [],
        "micro_ap": micro_ap,
        "micro_auc": micro_auc,
        "micro_pr": micro_pr,
        "micro_roc": [p for p in micro_roc if math.isfinite(p[0])],
        "per_class": per_class_curves,
    }
    return MetricsReport(K, len(y), per_class, averaged, topk, aps, aucs, curves, cm.counts.tolist())


def write_curve_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "x", "y"])
        w.writerows(points)


# ---------------------------------------------------------- cross-fold


@dataclass(frozen=True)
class FoldAggregate:
    n_folds: int
    mean: dict
    std: dict

    def to_dict(self):
        return {"n_folds": self.n_folds, "mean": self.mean, "std": self.std}


def crossfold_aggregate(reports: Sequence) -> FoldAggregate:
    """Unweighted mean and population std of each scalar metric over folds.

    Accepts :class:`MetricsReport` objects or plain ``{name: value}`` dicts.
    """
    if len(reports) < 2:
        raise MetricsError("cross-fold aggregation needs at least 2 folds")
    rows = [r.scalars() if isinstance(r, MetricsReport) else dict(r) for r in reports]
    keys = set(rows[0])
    for i, r in enumerate(rows[1:], start=1):
        if set(r) != keys:
            raise MetricsError(f"fold {i} metric set differs from fold 0")
    mean, std = {}, {}
    for k in sorted(keys):
        v = np.array([r[k] for r in rows], dtype=np.float64)
        mean[k] = float(v.mean())
        std[k] = float(v.std())
    return FoldAggregate(len(rows), mean, std)
