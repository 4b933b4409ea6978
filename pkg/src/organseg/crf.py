"""Superpixel CRF with a learned boundary term, solved exactly by min-cut.

Energy of a labeling x (1 = organ):

    E(x) = sum_i unary[i, x_i] + sum_(i,j) w_ij [x_i != x_j]

with ``unary = (-ln(1 - p), -ln p)`` and nonnegative edge weights, so a
single s-t cut gives the global minimum.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .regionnet import crop_batch, region_bboxes
from .superpixel import RegionAdjacency, SuperpixelMap

EPS = 1e-6


@dataclass(frozen=True)
class CrfGraph:
    unary: np.ndarray  # (n, 2): cost of label 0, cost of label 1
    edges: np.ndarray  # (m, 2) node indices
    weights: np.ndarray  # (m,) nonnegative, may be inf
    lam: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.weights) < 0):
            raise ValueError("pairwise weights must be nonnegative")

    @property
    def n_nodes(self):
        return len(self.unary)


def build_crf(unary_p, edges, q_same, lam: float, lengths=None) -> CrfGraph:
    """Assemble the CRF from node probabilities and edge same-label probabilities.

    The pairwise weight is ``lam * max(0, -ln(1 - q_same)) * length`` with the
    boundary length defaulting to 1.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    p = np.clip(np.asarray(unary_p, dtype=np.float64), EPS, 1 - EPS)
    q = np.clip(np.asarray(q_same, dtype=np.float64), EPS, 1 - EPS)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(q) != len(e):
        raise ValueError("one same-label probability per edge is required")
    length = np.ones(len(e)) if lengths is None else np.asarray(lengths, dtype=np.float64)
    unary = np.stack([-np.log1p(-p), -np.log(p)], axis=1)
    w = lam * np.maximum(0.0, -np.log1p(-q)) * length
    return CrfGraph(unary, e, w, float(lam))


def energy(g: CrfGraph, labels) -> float:
    x = np.asarray(labels, dtype=np.int64)
    e = float(g.unary[np.arange(g.n_nodes), x].sum())
    if len(g.edges):
        diff = x[g.edges[:, 0]] != x[g.edges[:, 1]]
        if diff.any():
            e += float(np.asarray(g.weights)[diff].sum())
    return e


class _Dinic:
    def __init__(self, n):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to, self.cap = [], []

    def add(self, u, v, c_uv, c_vu=0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(c_uv)
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(c_vu)

    def _bfs(self, s, t, tol):
        level = [-1] * self.n
        level[s] = 0
        dq = deque([s])
        while dq:
            u = dq.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if level[v] < 0 and self.cap[e] > tol:
                    level[v] = level[u] + 1
                    dq.append(v)
        return level

    def maxflow(self, s, t, tol):
        flow = 0.0
        while True:
            level = self._bfs(s, t, tol)
            if level[t] < 0:
                return flow
            it = [0] * self.n
            while True:
                f = self._augment(s, t, level, it, tol)
                if f <= tol:
                    break
                flow += f

    def _augment(self, s, t, level, it, tol):
        # iterative DFS along the level graph; returns the pushed amount
        stack, path = [s], []
        while stack:
            u = stack[-1]
            if u == t:
                f = min(self.cap[e] for e in path)
                for e in path:
                    self.cap[e] -= f
                    self.cap[e ^ 1] += f
                return f
            advanced = False
            while it[u] < len(self.head[u]):
                e = self.head[u][it[u]]
                v = self.to[e]
                if self.cap[e] > tol and level[v] == level[u] + 1:
                    stack.append(v)
                    path.append(e)
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                stack.pop()
                if path:
                    prev = stack[-1]
                    path.pop()
                    it[prev] += 1
        return 0.0

    def reachable(self, s, tol):
        seen = [False] * self.n
        seen[s] = True
        dq = deque([s])
        while dq:
            u = dq.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if not seen[v] and self.cap[e] > tol:
                    seen[v] = True
                    dq.append(v)
        return seen


def max_flow_min_cut(g: CrfGraph) -> np.ndarray:
    """Exact minimizer of the CRF energy as a uint8 label vector.

    Source side means label 1. Labels are read off as the nodes reachable
    from the source in the final residual graph, the smallest source set of
    any minimum cut, so ties resolve to label 0 (the lexicographically
    smallest optimal labeling).
    """
    n = g.n_nodes
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    unary = np.asarray(g.unary, dtype=np.float64)
    base = unary.min(axis=1, keepdims=True)
    u = unary - base
    w = np.asarray(g.weights, dtype=np.float64)
    finite = np.isfinite(w)
    big = float(u.sum() + w[finite].sum() + 1.0)
    w = np.where(finite, w, big)
    tol = 1e-12 * max(big, 1.0)
    s, t = n, n + 1
    net = _Dinic(n + 2)
    for i in range(n):
        c0, c1 = u[i]
        if c0 > 0:
            net.add(s, i, c0)  # cut when i takes label 0
        if c1 > 0:
            net.add(i, t, c1)  # cut when i takes label 1
    for (a, b), wi in zip(g.edges, w):
        if a != b and wi > 0:
            net.add(int(a), int(b), wi, wi)
    net.maxflow(s, t, tol)
    seen = net.reachable(s, tol)
    return np.array(seen[:n], dtype=np.uint8)


def brute_force_min(g: CrfGraph):
    """Exhaustive minimum over all 2^n labelings (small graphs only)."""
    n = g.n_nodes
    if n > 20:
        raise ValueError("brute force limited to 20 nodes")
    best, best_x = np.inf, None
    for code in range(2**n):
        x = np.array([(code >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)
        e = energy(g, x)
        if e < best - 1e-12:
            best, best_x = e, x
    return best, best_x


# --------------------------------------------------------------------------
# edge samples and per-volume CRF segmentation


def candidate_edges(adj: RegionAdjacency, ids):
    """Adjacency edges with both ends in ``ids``.

    Returns ``(local_edges, global_edges, lengths)``, local indices into ``ids``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.full(adj.n_nodes, -1, dtype=np.int64)
    pos[ids] = np.arange(len(ids))
    keep = (pos[adj.a] >= 0) & (pos[adj.b] >= 0)
    ga, gb = adj.a[keep], adj.b[keep]
    return (
        np.stack([pos[ga], pos[gb]], axis=1),
        np.stack([ga, gb], axis=1),
        adj.length[keep].astype(np.float64),
    )


def edge_crops(norm_ct, p0, sp: SuperpixelMap, global_edges, out: int = 64, bboxes=None):
    """Square crop of the joint bounding box of each superpixel pair."""
    if bboxes is None:
        bboxes = region_bboxes(sp)
    ge = np.asarray(global_edges, dtype=np.int64).reshape(-1, 2)
    ba, bb = bboxes[ge[:, 0]], bboxes[ge[:, 1]]
    joint = np.stack(
        [
            ba[:, 0],
            np.minimum(ba[:, 1], bb[:, 1]),
            np.maximum(ba[:, 2], bb[:, 2]),
            np.minimum(ba[:, 3], bb[:, 3]),
            np.maximum(ba[:, 4], bb[:, 4]),
        ],
        axis=1,
    )
    chans = [norm_ct]
    if p0 is not None:
        chans.append(2.0 * np.asarray(p0.data if hasattr(p0, "data") else p0) - 1.0)
    return crop_batch(chans, joint, 1.0, out)


def build_edge_dataset(norm_ct, p0, sp, adj, opt_labels, ids, out: int = 64):
    """One sample per candidate adjacency edge; label 1 iff optimal labels differ.

    Returns ``(images, labels, global_edges)``.
    """
    _, ge, _ = candidate_edges(adj, ids)
    lab = np.asarray(opt_labels)
    y = (lab[ge[:, 0]] != lab[ge[:, 1]]).astype(np.uint8)
    return edge_crops(norm_ct, p0, sp, ge, out), y, ge


@dataclass
class CrfCase:
    """Everything needed to segment one volume with the CRF at any lambda."""

    sp: SuperpixelMap
    ids: np.ndarray  # candidate global ids
    unary_p: np.ndarray  # per candidate
    edges: np.ndarray  # local edges
    lengths: np.ndarray
    q_same: np.ndarray  # per edge
    gt: object = None  # Mask, training cases only

    def labels(self, lam: float) -> np.ndarray:
        g = build_crf(self.unary_p, self.edges, self.q_same, lam, self.lengths)
        return max_flow_min_cut(g)

    def segment(self, lam: float):
        from .volume import Mask

        keep = np.zeros(self.sp.n_total, dtype=bool)
        keep[self.ids[self.labels(lam).astype(bool)]] = True
        return Mask(keep[self.sp.global_labels()], self.sp.spacing)


def grid_search_lambda(cases, grid):
    """Lambda with the highest mean training DSC; ties go to the smaller value.

    Returns ``(lam, sweep)`` where sweep lists ``(lam, mean_dsc)`` ascending.
    """
    from .eval import dice

    values = sorted(set(float(x) for x in grid))
    if not values:
        raise ValueError("empty lambda grid")
    sweep = []
    for lam in values:
        sweep.append((lam, float(np.mean([dice(c.segment(lam), c.gt) for c in cases]))))
    best = max(sweep, key=lambda r: r[1])[1]
    lam = next(l for l, d in sweep if d == best)
    return lam, sweep
