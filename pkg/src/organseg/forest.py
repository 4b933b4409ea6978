"""Bagged random forests of axis-aligned Gini trees, with out-of-bag scoring."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RFST"
VERSION = 1


@dataclass
class Tree:
    """Flat preorder tree. ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            na = node[active]
            go_left = X[rows[active], f[active]] <= self.threshold[na]
            node[active] = np.where(go_left, self.left[na], self.right[na])

    def predict(self, X):
        return self.value[self.apply(X)]


@dataclass
class RandomForestModel:
    trees: list
    n_features: int
    max_depth: int
    seed: int
    in_bag: list = field(default_factory=list, repr=False)

    @property
    def n_trees(self):
        return len(self.trees)


def _best_split(x, y):
    """Best Gini split of one feature; returns (impurity, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    pos_l = np.cumsum(ys)[:-1]
    n_l = np.arange(1, n)
    n_r = n - n_l
    pos_r = ys.sum() - pos_l
    imp = n_l * (2 * (pos_l / n_l) * (1 - pos_l / n_l)) + n_r * (
        2 * (pos_r / n_r) * (1 - pos_r / n_r)
    )
    imp = np.where(valid, imp, np.inf)
    i = int(np.argmin(imp))
    return float(imp[i]), 0.5 * (float(xs[i]) + float(xs[i + 1]))


def _grow(X, y, max_depth, m_try, rng, min_leaf=1):
    feature, threshold, value, left, right = [], [], [], [], []

    def node(idx, depth):
        me = len(feature)
        yi = y[idx]
        p = float(yi.mean())
        feature.append(-1)
        threshold.append(0.0)
        value.append(p)
        left.append(-1)
        right.append(-1)
        if depth >= max_depth or p == 0.0 or p == 1.0 or len(idx) < 2 * min_leaf:
            return me
        best = None
        for f in rng.choice(X.shape[1], size=m_try, replace=False):
            s = _best_split(X[idx, f], yi)
            if s is not None and (best is None or s[0] < best[0]):
                best = (s[0], s[1], int(f))
        if best is None:
            return me
        _, thr, f = best
        go_left = X[idx, f] <= thr
        feature[me] = f
        threshold[me] = thr
        left[me] = node(idx[go_left], depth + 1)
        right[me] = node(idx[~go_left], depth + 1)
        return me

    node(np.arange(len(y)), 0)
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(value, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
    )


def train_rf(
    features,
    labels,
    n_trees: int = 32,
    max_depth: int = 10,
    seed: int = 0,
    max_features: int | None = None,
    balanced: bool = False,
) -> RandomForestModel:
    """Fit a random forest for binary labels.

    Each tree sees a bootstrap sample (class-stratified with equal class
    counts when ``balanced``) and considers ``max_features`` random features
    per split, ``round(sqrt(d))`` by default. Leaves store the fraction of
    positive bootstrap samples.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if y.min() == y.max():
        raise ValueError("training data contains a single class")
    d = X.shape[1]
    m_try = max_features or max(1, int(round(np.sqrt(d))))
    m_try = min(m_try, d)
    pos, neg = np.nonzero(y == 1)[0], np.nonzero(y == 0)[0]
    trees, in_bag = [], []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.Generator(np.random.PCG64(child))
        if balanced:
            half = len(y) // 2
            idx = np.concatenate([rng.choice(pos, half), rng.choice(neg, len(y) - half)])
        else:
            idx = rng.integers(0, len(y), size=len(y))
        mask = np.zeros(len(y), dtype=bool)
        mask[idx] = True
        in_bag.append(mask)
        trees.append(_grow(X[idx], y[idx], max_depth, m_try, rng))
    return RandomForestModel(trees, d, max_depth, seed, in_bag)


def rf_predict(m: RandomForestModel, features) -> np.ndarray:
    """Mean leaf probability over all trees."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ValueError(f"expected {m.n_features} features, got shape {X.shape}")
    acc = np.zeros(len(X))
    for t in m.trees:
        acc += t.predict(X)
    return np.clip(acc / len(m.trees), 0.0, 1.0)


def rf_oob_predict(m: RandomForestModel, features) -> np.ndarray:
    """Out-of-bag probabilities for the training rows the forest was fit on.

    Rows that were in-bag for every tree fall back to the full-forest score.
    """
    X = np.asarray(features, dtype=np.float64)
    if not m.in_bag or len(m.in_bag[0]) != len(X):
        raise ValueError("out-of-bag scores need the exact training matrix")
    acc = np.zeros(len(X))
    cnt = np.zeros(len(X))
    for t, bag in zip(m.trees, m.in_bag):
        oob = ~bag
        acc[oob] += t.predict(X[oob])
        cnt[oob] += 1
    full = rf_predict(m, X)
    return np.where(cnt > 0, acc / np.maximum(cnt, 1), full)


# --------------------------------------------------------------------------
# serialization: magic, header, then per tree a node count and preorder
# records (int32 feature, float64 threshold, float64 value), little-endian


def dumps_forest(m: RandomForestModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIIQ", VERSION, m.n_trees, m.n_features, m.max_depth, m.seed))
    rec = np.dtype([("f", "<i4"), ("t", "<f8"), ("v", "<f8")])
    for t in m.trees:
        buf.write(struct.pack("<I", t.n_nodes))
        arr = np.empty(t.n_nodes, dtype=rec)
        arr["f"], arr["t"], arr["v"] = t.feature, t.threshold, t.value
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_forest(data: bytes) -> RandomForestModel:
    if data[:4] != MAGIC:
        raise ValueError("not a forest file (bad magic)")
    version, n_trees, n_features, max_depth, seed = struct.unpack_from("<IIIIQ", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported forest version {version}")
    off = 4 + struct.calcsize("<IIIIQ")
    rec = np.dtype([("f", "<i4"), ("t", "<f8"), ("v", "<f8")])
    trees = []
    for _ in range(n_trees):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        arr = np.frombuffer(data, dtype=rec, count=n, offset=off)
        off += n * rec.itemsize
        feature = arr["f"].astype(np.int64)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        _link_preorder(feature, left, right)
        trees.append(
            Tree(feature, arr["t"].astype(np.float64), arr["v"].astype(np.float64), left, right)
        )
    if off != len(data):
        raise ValueError("trailing bytes in forest file")
    return RandomForestModel(trees, n_features, max_depth, seed)


def _link_preorder(feature, left, right):
    # an internal node's left child is the next record; its right child
    # follows the left subtree
    pending = []
    for i in range(len(feature)):
        if pending:
            parent = pending.pop()
            if left[parent] == -1:
                left[parent] = i
                pending.append(parent)
            else:
                right[parent] = i
        if feature[i] >= 0:
            pending.append(i)
    if pending:
        raise ValueError("truncated tree records")


def save_forest(m: RandomForestModel, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_forest(m))


def load_forest(path) -> RandomForestModel:
    with open(path, "rb") as f:
        return loads_forest(f.read())
