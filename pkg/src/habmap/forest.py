"""Random forest of Gini-split decision trees over per-pixel features.

Trees are stored as flat preorder arrays so prediction can route a whole
batch of samples through a tree with a handful of vectorized steps.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RFOR"
FORMAT_VERSION = 1
_TIE_EPS = 1e-12


class ForestError(ValueError):
    pass


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ForestError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _weighted_child_impurity(left_counts, right_counts):
    # n_L*gini_L + n_R*gini_R, vectorized over candidate rows
    nl = left_counts.sum(axis=-1)
    nr = right_counts.sum(axis=-1)
    gl = nl - np.sum(left_counts**2, axis=-1) / np.maximum(nl, 1)
    gr = nr - np.sum(right_counts**2, axis=-1) / np.maximum(nr, 1)
    return gl + gr


def best_split(X, y, candidate_features, n_classes: int | None = None):
    """Exhaustive Gini split search.

    Scans every candidate feature and every midpoint between consecutive
    distinct sorted values. Returns ``(feature, threshold, decrease)`` or
    ``None`` when nothing reduces impurity. Ties go to the lower feature
    index, then the lower threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < 2:
        return None
    K = n_classes if n_classes is not None else int(y.max()) + 1
    parent_counts = np.bincount(y, minlength=K).astype(np.float64)
    parent = n - np.sum(parent_counts**2) / n  # n * gini(parent)
    if parent <= _TIE_EPS:
        return None
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0

    best = None
    best_dec = 0.0
    for f in sorted(int(f) for f in candidate_features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        boundaries = np.flatnonzero(xs[1:] != xs[:-1])
        if boundaries.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[boundaries]
        right = parent_counts - left
        dec = (parent - _weighted_child_impurity(left, right)) / n
        i = int(np.argmax(dec >= dec.max() - _TIE_EPS))
        if dec[i] > _TIE_EPS and (best is None or dec[i] > best_dec + _TIE_EPS):
            b = boundaries[i]
            best_dec = float(dec[i])
            best = (f, float((xs[b] + xs[b + 1]) / 2.0), best_dec)
    return best


@dataclass
class Tree:
    """Flat preorder tree. ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, K) leaf distributions, zeros on split nodes

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def fit_tree(
    X,
    y,
    n_classes: int | None = None,
    max_depth: int | None = None,
    min_samples_split: int = 2,
    features_per_split: int | None = None,
    seed: int = 0,
) -> Tree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ForestError("cannot fit a tree on an empty sample set")
    K = n_classes if n_classes is not None else int(y.max()) + 1
    d = X.shape[1]
    m = d if features_per_split is None else features_per_split
    if not 1 <= m <= d:
        raise ForestError(f"features_per_split must be in [1, {d}], got {m}")
    rng = np.random.default_rng(seed)

    feature, threshold, left, right, value = [], [], [], [], []
    # (sample indices, depth, parent node, is_left); preorder by popping left first
    stack = [(np.arange(len(y)), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        node = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)

        split = None
        yi = y[idx]
        if (
            len(idx) >= min_samples_split
            and (max_depth is None or depth < max_depth)
            and np.any(yi != yi[0])
        ):
            cands = np.arange(d) if m == d else np.sort(rng.choice(d, m, replace=False))
            split = best_split(X[idx], yi, cands, K)
        if split is None:
            counts = np.bincount(yi, minlength=K).astype(np.float64)
            value[node] = counts / counts.sum()
            continue
        f, thr, _ = split
        feature[node] = f
        threshold[node] = thr
        value[node] = np.zeros(K)
        go_left = X[idx, f] <= thr
        stack.append((idx[~go_left], depth + 1, node, False))
        stack.append((idx[go_left], depth + 1, node, True))

    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


@dataclass
class RandomForestModel:
    trees: list[Tree]
    n_classes: int
    n_features: int
    features_per_split: int
    seed: int = 0
    bootstrap: bool = field(default=True)

    def predict_proba(self, X) -> np.ndarray:
        """Mean of leaf distributions; accepts one vector or an (N, d) matrix."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X[None] if single else X
        if X2.shape[1] != self.n_features:
            raise ForestError(
                f"expected {self.n_features} features, got {X2.shape[1]}"
            )
        acc = np.zeros((len(X2), self.n_classes))
        for t in self.trees:
            acc += t.predict_proba(X2)
        acc /= len(self.trees)
        return acc[0] if single else acc

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)


def tree_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def fit_forest(
    X,
    y,
    n_classes: int | None = None,
    n_trees: int = 100,
    features_per_split: int | None = None,
    seed: int = 0,
    max_depth: int | None = None,
    min_samples_split: int = 2,
    bootstrap: bool = True,
) -> RandomForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ForestError("cannot fit a forest on an empty dataset")
    if n_trees < 1:
        raise ForestError("n_trees must be >= 1")
    K = n_classes if n_classes is not None else int(y.max()) + 1
    d = X.shape[1]
    m = features_per_split if features_per_split is not None else max(1, math.isqrt(d))
    trees = []
    for t in range(n_trees):
        s = tree_seed(seed, t)
        if bootstrap:
            idx = np.random.default_rng(s).integers(0, len(y), len(y))
            Xt, yt = X[idx], y[idx]
        else:
            Xt, yt = X, y
        trees.append(
            fit_tree(Xt, yt, K, max_depth, min_samples_split, m, seed=s)
        )
    return RandomForestModel(trees, K, d, m, seed, bootstrap)


# --------------------------------------------------------------------- I/O


def forest_to_bytes(model: RandomForestModel) -> bytes:
    out = [
        MAGIC,
        struct.pack(
            "<HIIIIQ",
            FORMAT_VERSION,
            model.n_classes,
            len(model.trees),
            model.n_features,
            model.features_per_split,
            model.seed & 0xFFFFFFFFFFFFFFFF,
        ),
    ]
    for t in model.trees:
        out.append(struct.pack("<I", t.n_nodes))
        for i in range(t.n_nodes):
            if t.feature[i] < 0:
                out.append(b"\x00" + t.value[i].astype("<f4").tobytes())
            else:
                out.append(b"\x01" + struct.pack("<Id", int(t.feature[i]), float(t.threshold[i])))
    return b"".join(out)


def forest_from_bytes(buf: bytes) -> RandomForestModel:
    if buf[:4] != MAGIC:
        raise ForestError("not a random forest model file (bad magic)")
    version, K, n_trees, d, m, seed = struct.unpack_from("<HIIIIQ", buf, 4)
    if version != FORMAT_VERSION:
        raise ForestError(f"unsupported model version {version}")
    off = 4 + struct.calcsize("<HIIIIQ")
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack_from("<I", buf, off)
        off += 4
        feature = np.full(n_nodes, -1, dtype=np.int64)
        threshold = np.zeros(n_nodes)
        left = np.full(n_nodes, -1, dtype=np.int64)
        right = np.full(n_nodes, -1, dtype=np.int64)
        value = np.zeros((n_nodes, K))
        # preorder: a split's left child is the next node; right child follows its left subtree
        pending: list[int] = []
        for i in range(n_nodes):
            if pending:
                parent = pending[-1]
                if left[parent] < 0:
                    left[parent] = i
                else:
                    right[parent] = i
                    pending.pop()
            tag = buf[off]
            off += 1
            if tag == 0:
                v = np.frombuffer(buf, dtype="<f4", count=K, offset=off).astype(np.float64)
                value[i] = v / v.sum()
                off += 4 * K
            elif tag == 1:
                f, thr = struct.unpack_from("<Id", buf, off)
                off += struct.calcsize("<Id")
                feature[i], threshold[i] = f, thr
                pending.append(i)
            else:
                raise ForestError(f"corrupt node tag {tag}")
        trees.append(Tree(feature, threshold, left, right, value))
    return RandomForestModel(trees, K, d, m, seed)


def save_forest(path, model: RandomForestModel) -> None:
    Path(path).write_bytes(forest_to_bytes(model))


def load_forest(path) -> RandomForestModel:
    return forest_from_bytes(Path(path).read_bytes())
