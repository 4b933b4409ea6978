"""Entropy-rate superpixels on axial slices, region adjacency and optimal labels.

The greedy clustering follows Liu et al.'s entropy-rate formulation: edges of
the 8-connected pixel graph are added one at a time, picking the edge with the
largest gain in random-walk entropy rate plus a weighted balancing term, as
long as the edge joins two different trees. Gains only shrink as edges are
added (submodularity), so a lazily re-evaluated max-heap is exact.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .volume import Mask, Volume

# (dy, dx) for the four forward neighbours of the 8-connected grid
_OFFSETS_8 = ((0, 1), (1, 0), (1, 1), (1, -1))


def _grid_edges(h, w, offsets):
    idx = np.arange(h * w).reshape(h, w)
    us, vs = [], []
    for dy, dx in offsets:
        ys = slice(0, h - dy)
        if dx >= 0:
            a = idx[ys, 0 : w - dx]
            b = idx[dy:, dx:]
        else:
            a = idx[ys, -dx:]
            b = idx[dy:, : w + dx]
        us.append(a.ravel())
        vs.append(b.ravel())
    return np.concatenate(us), np.concatenate(vs)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a):
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


def _xlogx(p):
    return p * math.log(p) if p > 0 else 0.0


def _entropy_gain(loop, p):
    # loop: current self-loop probability, p: probability moved onto the new edge
    return -_xlogx(p) - _xlogx(loop - p) + _xlogx(loop)


def entropy_rate_superpixels(
    image,
    n_regions: int,
    lam: float = 0.5,
    sigma_i: float | None = None,
    audit=None,
) -> np.ndarray:
    """Partition a 2D image into exactly ``n_regions`` 4-connected regions.

    Parameters
    ----------
    image : (H, W) array
    n_regions : int
        Number of output regions, ``1 <= n_regions <= H * W``.
    lam : float
        Balancing weight. The value used in the objective is
        ``lam * n_regions / total_weight``.
    sigma_i : float, optional
        Intensity bandwidth of the similarity ``exp(-(Ii - Ij)^2 / (2 sigma_i^2))``.
        Defaults to the sample standard deviation of the image (1 if constant).
    audit : callable, optional
        Called as ``audit(u, v)`` for every accepted edge; used by tests to
        check the forest constraint.

    Returns
    -------
    (H, W) uint32 label image with labels ``0 .. n_regions - 1`` numbered in
    raster order of first appearance.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2D image")
    h, w = img.shape
    n_pix = h * w
    if not 1 <= n_regions <= n_pix:
        raise ValueError(f"n_regions={n_regions} must lie in [1, {n_pix}]")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if sigma_i is None:
        sigma_i = float(img.std(ddof=1)) if n_pix > 1 else 0.0
        if not sigma_i > 0:
            sigma_i = 1.0
    elif sigma_i <= 0:
        raise ValueError("sigma_i must be > 0")

    u, v = _grid_edges(h, w, _OFFSETS_8)
    flat = img.ravel()
    weight = np.exp(-((flat[u] - flat[v]) ** 2) / (2.0 * sigma_i**2))
    wsum = np.bincount(u, weight, n_pix) + np.bincount(v, weight, n_pix)
    total = float(wsum.sum())
    balance = lam * n_regions / total if total > 0 else 0.0

    loop = [1.0] * n_pix
    wsum_l = wsum.tolist()
    mu = (wsum / total).tolist() if total > 0 else [0.0] * n_pix
    u_l, v_l, w_l = u.tolist(), v.tolist(), weight.tolist()
    uf = _UnionFind(n_pix)
    inv_npix = 1.0 / n_pix

    def gain(e):
        a, b, we = u_l[e], v_l[e], w_l[e]
        g = 0.0
        if wsum_l[a] > 0:
            g += mu[a] * _entropy_gain(loop[a], we / wsum_l[a])
        if wsum_l[b] > 0:
            g += mu[b] * _entropy_gain(loop[b], we / wsum_l[b])
        if balance:
            pa = uf.size[uf.find(a)] * inv_npix
            pb = uf.size[uf.find(b)] * inv_npix
            g += balance * (-_xlogx(pa + pb) + _xlogx(pa) + _xlogx(pb))
        return g

    heap = [(-gain(e), e) for e in range(len(u_l))]
    heapq.heapify(heap)
    components = n_pix
    while components > n_regions and heap:
        _, e = heapq.heappop(heap)
        a, b = u_l[e], v_l[e]
        if uf.find(a) == uf.find(b):
            continue
        g = gain(e)
        if heap and g < -heap[0][0]:
            heapq.heappush(heap, (-g, e))
            continue
        if audit is not None:
            audit(a, b)
        uf.union(a, b)
        we = w_l[e]
        if wsum_l[a] > 0:
            loop[a] = max(0.0, loop[a] - we / wsum_l[a])
        if wsum_l[b] > 0:
            loop[b] = max(0.0, loop[b] - we / wsum_l[b])
        components -= 1

    roots = np.fromiter((uf.find(i) for i in range(n_pix)), dtype=np.int64, count=n_pix)
    return _enforce_4_connectivity(roots.reshape(h, w), img, n_regions)


def _components_4(labels):
    h, w = labels.shape
    u, v = _grid_edges(h, w, ((0, 1), (1, 0)))
    flat = labels.ravel()
    same = flat[u] == flat[v]
    n = h * w
    graph = coo_matrix((np.ones(int(same.sum())), (u[same], v[same])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return _raster_relabel(comp.reshape(h, w))


def _raster_relabel(labels):
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    uniq = flat[first[order]]
    lut = {int(old): new for new, old in enumerate(uniq)}
    return np.vectorize(lut.__getitem__, otypes=[np.int64])(labels)


def _enforce_4_connectivity(labels, img, n_regions):
    """Split 8-connected trees into 4-connected pieces, then merge back to ``n_regions``.

    The smallest piece is merged into the 4-adjacent region with the closest
    mean intensity (ties: longer shared border, then lower label).
    """
    lab = _components_4(labels)
    m = int(lab.max()) + 1
    if m == n_regions:
        return lab.astype(np.uint32)
    h, w = lab.shape
    flat = lab.ravel()
    size = np.bincount(flat, minlength=m).astype(np.int64).tolist()
    total = np.bincount(flat, img.ravel(), minlength=m).tolist()
    u, v = _grid_edges(h, w, ((0, 1), (1, 0)))
    a, b = flat[u], flat[v]
    diff = a != b
    border = {}
    for x, y in zip(np.minimum(a[diff], b[diff]).tolist(), np.maximum(a[diff], b[diff]).tolist()):
        border[(x, y)] = border.get((x, y), 0) + 1
    nbrs = {i: {} for i in range(m)}
    for (x, y), c in border.items():
        nbrs[x][y] = c
        nbrs[y][x] = c
    parent = list(range(m))
    alive = set(range(m))
    while len(alive) > n_regions:
        r = min(alive, key=lambda i: (size[i], i))
        mean_r = total[r] / size[r]
        t = min(
            nbrs[r],
            key=lambda j: (abs(total[j] / size[j] - mean_r), -nbrs[r][j], j),
        )
        parent[r] = t
        size[t] += size[r]
        total[t] += total[r]
        for j, c in nbrs.pop(r).items():
            nbrs[j].pop(r, None)
            if j != t:
                nbrs[t][j] = nbrs[t].get(j, 0) + c
                nbrs[j][t] = nbrs[j].get(t, 0) + c
        alive.discard(r)

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    lut = np.array([root(i) for i in range(m)])
    return _raster_relabel(lut[lab]).astype(np.uint32)


# --------------------------------------------------------------------------
# volume-level maps


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    """Per-slice superpixel labels; ``labels[z]`` holds ids ``0 .. counts[z] - 1``."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint32, copy=True)
        if labels.ndim != 3:
            raise ValueError("superpixel labels must be a 3D array")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        counts = labels.reshape(labels.shape[0], -1).max(axis=1).astype(np.int64) + 1
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "offsets", offsets)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    def global_labels(self) -> np.ndarray:
        """Volume of ids unique across the whole volume (slice offset + label)."""
        return self.labels.astype(np.int64) + self.offsets[:, None, None]

    def slice_of(self, gid) -> np.ndarray:
        """Slice index of each global id."""
        return np.searchsorted(self.offsets, np.asarray(gid), side="right") - 1

    def to_volume(self) -> Volume:
        return Volume(self.labels, self.spacing)

    @classmethod
    def from_volume(cls, v: Volume) -> "SuperpixelMap":
        if v.data.dtype != np.uint32:
            raise ValueError("superpixel maps are stored as MET_UINT volumes")
        return cls(v.data, v.spacing)

    def __eq__(self, other):
        return (
            isinstance(other, SuperpixelMap)
            and self.spacing == other.spacing
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def default_region_count(area: int, area_per_region: float = 400.0, minimum: int = 8) -> int:
    return int(min(area, max(minimum, area // area_per_region)))


def compute_superpixels(
    v: Volume,
    area_per_region: float = 400.0,
    min_regions: int = 8,
    lam: float = 0.5,
    sigma_i: float | None = None,
) -> SuperpixelMap:
    """Run :func:`entropy_rate_superpixels` independently on every axial slice."""
    nz, ny, nx = v.shape
    n = default_region_count(ny * nx, area_per_region, min_regions)
    out = np.empty(v.shape, dtype=np.uint32)
    for z in range(nz):
        out[z] = entropy_rate_superpixels(v.data[z], n, lam=lam, sigma_i=sigma_i)
    return SuperpixelMap(out, v.spacing)


@dataclass(frozen=True)
class RegionAdjacency:
    """Undirected in-slice adjacency; ``a < b`` are global ids, ``length`` in pixels."""

    a: np.ndarray
    b: np.ndarray
    length: np.ndarray
    n_nodes: int

    def __len__(self):
        return len(self.a)

    def pairs(self):
        return list(zip(self.a.tolist(), self.b.tolist()))


def build_adjacency(sp: SuperpixelMap) -> RegionAdjacency:
    g = sp.global_labels()
    pairs = []
    for a, b in ((g[:, :, :-1], g[:, :, 1:]), (g[:, :-1, :], g[:, 1:, :])):
        a, b = a.ravel(), b.ravel()
        d = a != b
        pairs.append(np.stack([np.minimum(a[d], b[d]), np.maximum(a[d], b[d])], axis=1))
    allp = np.concatenate(pairs, axis=0)
    if len(allp) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RegionAdjacency(empty, empty, empty, sp.n_total)
    uniq, counts = np.unique(allp, axis=0, return_counts=True)
    return RegionAdjacency(uniq[:, 0], uniq[:, 1], counts.astype(np.int64), sp.n_total)


@dataclass(frozen=True)
class OptimalLabeling:
    labels: np.ndarray  # uint8 per global superpixel id
    dsc: float

    def paint(self, sp: SuperpixelMap) -> Mask:
        return Mask(self.labels[sp.global_labels()].astype(bool), sp.spacing)


def region_overlaps(sp: SuperpixelMap, gt: Mask):
    """Per global id: (area, number of ground-truth voxels inside)."""
    if sp.shape != gt.shape:
        raise ValueError(f"dims mismatch: superpixels {sp.shape} vs mask {gt.shape}")
    g = sp.global_labels().ravel()
    area = np.bincount(g, minlength=sp.n_total)
    inside = np.bincount(g, weights=gt.data.ravel().astype(np.float64), minlength=sp.n_total)
    return area.astype(np.int64), np.rint(inside).astype(np.int64)


def optimal_labels(sp: SuperpixelMap, gt: Mask) -> OptimalLabeling:
    """Per-superpixel labels that maximize Dice against ``gt``.

    Any Dice-optimal selection is a prefix of the regions ordered by overlap
    fraction ``|S & gt| / |S|``, so scanning prefixes is exact. The shortest
    optimal prefix is returned; for pure regions this reduces to the
    strict-majority rule.
    """
    area, inside = region_overlaps(sp, gt)
    n_gt = int(inside.sum())
    labels = np.zeros(sp.n_total, dtype=np.uint8)
    if n_gt == 0:
        return OptimalLabeling(labels, 1.0)
    cand = np.nonzero(inside > 0)[0]
    # descending fraction; exact rational ordering via cross-multiplication
    order = sorted(cand.tolist(), key=_FractionKey(inside, area))
    best, best_k = -1.0, 0
    tp = sel = 0
    for k, i in enumerate(order, 1):
        tp += int(inside[i])
        sel += int(area[i])
        d = 2.0 * tp / (sel + n_gt)
        if d > best + 1e-12:
            best, best_k = d, k
    labels[order[:best_k]] = 1
    return OptimalLabeling(labels, float(best))


class _FractionKey:
    def __init__(self, num, den):
        self.num, self.den = num, den

    def __call__(self, i):
        return _Frac(int(self.num[i]), int(self.den[i]), i)


class _Frac:
    __slots__ = ("n", "d", "i")

    def __init__(self, n, d, i):
        self.n, self.d, self.i = n, d, i

    def __lt__(self, other):
        lhs, rhs = self.n * other.d, other.n * self.d
        if lhs != rhs:
            return lhs > rhs
        return self.i < other.i
