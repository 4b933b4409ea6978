"""Cross-scale averaging, superpixel painting, 3D Gaussian smoothing, thresholding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Mask, Volume


@dataclass(frozen=True)
class OperatingPoint:
    map_id: int
    threshold: float
    sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def average_scales(scores) -> np.ndarray:
    """Mean over the scale axis of a ``(n_superpixels, n_scales)`` score table."""
    try:
        arr = np.asarray(scores, dtype=np.float64)
    except ValueError:
        raise ValueError("ragged score table: every superpixel needs the same scale count") from None
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError(f"expected a 2D (superpixel, scale) table, got shape {arr.shape}")
    return arr.mean(axis=1)


def paint_voxels(sp, candidates, probs) -> Volume:
    """Assign each candidate superpixel's probability to all of its voxels.

    ``probs`` maps global superpixel id to probability. Voxels outside the
    candidate set are 0.
    """
    ids = np.asarray(sorted(candidates), dtype=np.int64)
    missing = [int(i) for i in ids if int(i) not in probs]
    if missing:
        raise KeyError(f"no probability for candidate superpixels {missing[:5]}")
    lut = np.zeros(sp.n_total, dtype=np.float32)
    lut[ids] = np.array([probs[int(i)] for i in ids], dtype=np.float32)
    return Volume(lut[sp.global_labels()], sp.spacing)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian truncated at ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth_3d(p: Volume, sigma, isotropic: str = "voxel") -> Volume:
    """Separable Gaussian smoothing with replicate borders.

    ``sigma`` is in voxels by default. With ``isotropic="mm"`` it is read as
    millimetres and converted per axis using the volume spacing.
    """
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be >= 0")
    if isotropic == "voxel":
        sigmas = (float(sigma),) * 3
    elif isotropic == "mm":
        sx, sy, sz = p.spacing
        sigmas = (sigma / sz, sigma / sy, sigma / sx)
    else:
        raise ValueError(f"unknown isotropic mode {isotropic!r}")
    if all(s == 0 for s in sigmas):
        return p
    out = np.asarray(p.data, dtype=np.float64)
    for axis, s in enumerate(sigmas):
        if s > 0:
            out = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode="nearest")
    return Volume(out.astype(np.float32), p.spacing)


def threshold(p: Volume, op) -> Mask:
    """Strict thresholding: voxel is foreground iff value > threshold."""
    t = op.threshold if isinstance(op, OperatingPoint) else float(op)
    return Mask(p.data > t, p.spacing)
