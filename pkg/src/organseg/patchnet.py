"""2.5D patch sampling and strided dense labeling (the P0 probability map)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .convnet import ConvNetModel, predict_proba
from .volume import Mask, Volume


@dataclass(frozen=True)
class Patch25D:
    channels: np.ndarray  # (3, size, size): axial, coronal, sagittal
    center: tuple
    label: int | None = None


@dataclass(frozen=True)
class DenseLabelConfig:
    stride: int = 2
    patch_size: int = 64
    batch_size: int = 256

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


def normalize_intensity(v, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Map the volume's [1st, 99th] percentile range affinely onto [-1, 1], clamped.

    A volume with an empty percentile range maps to all zeros.
    """
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    lo, hi = np.percentile(data, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros(data.shape, dtype=np.float32)
    out = (data - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def extract_patches(norm: np.ndarray, centers, size: int) -> np.ndarray:
    """Batch of 2.5D patches, shape ``(B, 3, size, size)``, replicate-padded.

    Rows of the coronal and sagittal planes run along z; columns along x and y
    respectively. The centre voxel sits at ``(size // 2, size // 2)``.
    """
    c = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    nz, ny, nx = norm.shape
    off = np.arange(size) - size // 2
    z = c[:, 0, None] + off
    y = c[:, 1, None] + off
    x = c[:, 2, None] + off
    zc = np.clip(z, 0, nz - 1)
    yc = np.clip(y, 0, ny - 1)
    xc = np.clip(x, 0, nx - 1)
    cz, cy, cx = c[:, 0, None, None], c[:, 1, None, None], c[:, 2, None, None]
    axial = norm[cz, yc[:, :, None], xc[:, None, :]]
    coronal = norm[zc[:, :, None], cy, xc[:, None, :]]
    sagittal = norm[zc[:, :, None], yc[:, None, :], cx]
    return np.stack([axial, coronal, sagittal], axis=1)


def extract_patch_2_5d(v: Volume, center, size: int = 64, norm=None) -> Patch25D:
    center = tuple(int(t) for t in center)
    if len(center) != 3 or not all(0 <= c < n for c, n in zip(center, v.shape)):
        raise IndexError(f"center {center} outside volume of shape {v.shape}")
    if norm is None:
        norm = normalize_intensity(v)
    return Patch25D(extract_patches(norm, [center], size)[0], center)


def build_patch_dataset(
    v: Volume,
    candidate_mask: Mask,
    gt: Mask,
    per_class_cap: int,
    seed: int,
    size: int = 64,
    norm=None,
):
    """Class-balanced patches centred on candidate voxels.

    Returns ``(patches, labels, centers)``. Each class contributes
    ``min(per_class_cap, n_pos, n_neg)`` voxels drawn without replacement.
    """
    cand = candidate_mask.data
    pos = np.flatnonzero((cand & gt.data).ravel())
    neg = np.flatnonzero((cand & ~gt.data).ravel())
    if len(pos) == 0:
        raise ValueError("no positive (ground-truth) voxels inside the candidates")
    if len(neg) == 0:
        raise ValueError("no negative voxels inside the candidates")
    k = min(per_class_cap, len(pos), len(neg))
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.concatenate(
        [np.sort(rng.choice(pos, k, replace=False)), np.sort(rng.choice(neg, k, replace=False))]
    )
    labels = np.concatenate([np.ones(k, dtype=np.uint8), np.zeros(k, dtype=np.uint8)])
    centers = np.stack(np.unravel_index(idx, v.shape), axis=1)
    if norm is None:
        norm = normalize_intensity(v)
    return extract_patches(norm, centers, size), labels, centers


def lattice_mask(shape, stride: int) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[::stride, ::stride, ::stride] = True
    return m


def nearest_fill(values: np.ndarray, evaluated: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Copy each target voxel's value from its nearest evaluated voxel.

    Distances are Euclidean in index space; ties go to the evaluated voxel
    with the smallest (z, y, x) index.
    """
    out = np.array(values, copy=True)
    todo = targets & ~evaluated
    if not todo.any():
        return out
    src = np.argwhere(evaluated)
    if len(src) == 0:
        raise ValueError("no evaluated voxels to copy from")
    dst = np.argwhere(todo)
    src_lin = np.ravel_multi_index(src.T, values.shape)
    tree = cKDTree(src)
    k = min(len(src), 16)
    pending = np.arange(len(dst))
    choice = np.empty(len(dst), dtype=np.int64)
    while len(pending):
        _, nn = tree.query(dst[pending], k=k)
        nn = nn.reshape(len(pending), -1)
        d2 = ((src[nn] - dst[pending, None, :]) ** 2).sum(axis=2)
        best = d2.min(axis=1, keepdims=True)
        tied = d2 == best
        if k < len(src):
            unresolved = tied[:, -1]
        else:
            unresolved = np.zeros(len(pending), dtype=bool)
        lin = np.where(tied, src_lin[nn], np.iinfo(np.int64).max)
        pick = nn[np.arange(len(pending)), lin.argmin(axis=1)]
        done = ~unresolved
        choice[pending[done]] = pick[done]
        pending = pending[unresolved]
        k = min(len(src), k * 2)
    out[tuple(dst.T)] = values[tuple(src[choice].T)]
    return out


def dense_label(
    v: Volume,
    candidate_mask: Mask,
    m: ConvNetModel,
    cfg: DenseLabelConfig = DenseLabelConfig(),
    norm=None,
) -> Volume:
    """Evaluate the patch network on the stride lattice inside the candidates.

    Off-lattice candidate voxels take the value of the nearest evaluated
    lattice voxel; everything outside the candidates is 0. If the lattice
    misses the candidates entirely, every candidate voxel is evaluated.
    """
    if m.spec.input_shape[0] != 3:
        raise ValueError("the patch network must take 3 input channels")
    size = m.spec.input_shape[1]
    if norm is None:
        norm = normalize_intensity(v)
    cand = candidate_mask.data
    evaluated = cand & lattice_mask(v.shape, cfg.stride)
    if not evaluated.any():
        evaluated = cand.copy()
    out = np.zeros(v.shape, dtype=np.float32)
    centers = np.argwhere(evaluated)
    for i in range(0, len(centers), cfg.batch_size):
        chunk = centers[i : i + cfg.batch_size]
        probs = predict_proba(m, extract_patches(norm, chunk, size), cfg.batch_size)
        out[tuple(chunk.T)] = probs
    out = nearest_fill(out, evaluated, cand)
    return Volume(out, v.spacing)
