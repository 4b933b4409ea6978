"""Multi-scale square region crops, thin-plate-spline augmentation and
per-superpixel classification for the regional networks (R1 and R2)."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .convnet import ConvNetModel, predict_proba
from .superpixel import SuperpixelMap

DEFAULT_SCALES = (1.0, 1.5, 2.0, 3.0)
RECORD_MAGIC = b"RGNS"
RECORD_VERSION = 1


@dataclass(frozen=True)
class RegionSample:
    gid: int
    scale_index: int
    channels: np.ndarray  # (C, out, out); channel 0 CT, channel 1 P0 if present
    label: int | None = None


def region_bboxes(sp: SuperpixelMap) -> np.ndarray:
    """Per global id: ``(z, y0, y1, x0, x1)`` with inclusive bounds."""
    g = sp.global_labels()
    nz, ny, nx = g.shape
    n = sp.n_total
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    flat = g.ravel()
    out = np.zeros((n, 5), dtype=np.int64)
    out[:, 1] = out[:, 3] = np.iinfo(np.int64).max
    out[:, 2] = out[:, 4] = -1
    np.maximum.at(out[:, 0], flat, zz.ravel())
    np.minimum.at(out[:, 1], flat, yy.ravel())
    np.maximum.at(out[:, 2], flat, yy.ravel())
    np.minimum.at(out[:, 3], flat, xx.ravel())
    np.maximum.at(out[:, 4], flat, xx.ravel())
    return out


def crop_windows(bboxes: np.ndarray, scale: float):
    """Square window per bbox: ``(z, cy, cx, side)`` in pixel coordinates."""
    z = bboxes[:, 0].astype(np.float64)
    cy = (bboxes[:, 1] + bboxes[:, 2]) / 2.0
    cx = (bboxes[:, 3] + bboxes[:, 4]) / 2.0
    extent = np.maximum(bboxes[:, 2] - bboxes[:, 1], bboxes[:, 4] - bboxes[:, 3]) + 1
    return z, cy, cx, scale * extent


def sample_grid(center: np.ndarray, side: np.ndarray, out: int) -> np.ndarray:
    """Sample positions ``c - side/2 + (k + 0.5) side / out`` for k = 0..out-1."""
    k = (np.arange(out) + 0.5) / out
    return center[:, None] - side[:, None] / 2.0 + k[None, :] * side[:, None]


def crop_batch(channels, bboxes: np.ndarray, scale: float, out: int) -> np.ndarray:
    """Bilinear square crops of every bbox from each 3D channel, ``(B, C, out, out)``."""
    if scale < 1.0:
        raise ValueError("scale factor must be >= 1")
    z, cy, cx, side = crop_windows(bboxes, scale)
    ys = sample_grid(cy, side, out)
    xs = sample_grid(cx, side, out)
    b = len(bboxes)
    coords = np.empty((3, b, out, out))
    coords[0] = z[:, None, None]
    coords[1] = ys[:, :, None]
    coords[2] = xs[:, None, :]
    res = np.empty((b, len(channels), out, out), dtype=np.float32)
    for c, vol in enumerate(channels):
        res[:, c] = ndimage.map_coordinates(
            np.asarray(vol, dtype=np.float64), coords, order=1, mode="nearest"
        )
    return res


def _channels(norm_ct, p0):
    chans = [norm_ct]
    if p0 is not None:
        p = np.asarray(p0.data if hasattr(p0, "data") else p0, dtype=np.float32)
        chans.append(2.0 * p - 1.0)
    return chans


def region_crop(norm_ct, p0, sp: SuperpixelMap, gid: int, scale: float = 1.0, out: int = 64):
    """One square crop of superpixel ``gid``; ``norm_ct`` is the normalized CT array.

    ``p0`` (values in [0, 1]) becomes a second channel mapped to [-1, 1].
    """
    if not 0 <= gid < sp.n_total:
        raise KeyError(f"unknown superpixel id {gid}")
    bb = region_bboxes(sp)[[gid]]
    return RegionSample(int(gid), 0, crop_batch(_channels(norm_ct, p0), bb, scale, out)[0])


# --------------------------------------------------------------------------
# thin-plate splines; points are (row, col) pairs


def _tps_kernel(r):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r * r * np.log(np.where(r > 0, r, 1.0)), 0.0)


@dataclass(frozen=True)
class TPSDeformation:
    control: np.ndarray  # (k, 2) control points
    displacement: np.ndarray  # (k, 2)
    coeffs: np.ndarray  # (k, 2) radial coefficients c_i (normalized units)
    affine: np.ndarray  # (3, 2): rows constant, row, col
    scale: float  # coordinate normalization

    @property
    def translation(self) -> np.ndarray:
        """Constant term of the affine part, in pixels."""
        return self.affine[0] * self.scale

    @property
    def linear(self) -> np.ndarray:
        """2x2 linear part of the affine map (row-vector convention)."""
        return self.affine[1:]

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        u = pts / self.scale
        w = self.control / self.scale
        r = np.sqrt(((u[:, None, :] - w[None, :, :]) ** 2).sum(axis=2))
        mapped = _tps_kernel(r) @ self.coeffs + self.affine[0] + u @ self.affine[1:]
        return mapped * self.scale


def tps_fit(control, displacement, scale: float | None = None) -> TPSDeformation:
    """Interpolating thin-plate spline taking ``control[i]`` to ``control[i] + displacement[i]``.

    Coordinates are divided by ``scale`` (default: the control-point extent)
    before solving, which keeps the system well conditioned.
    """
    w = np.asarray(control, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(displacement, dtype=np.float64).reshape(-1, 2)
    if w.shape != d.shape:
        raise ValueError("control points and displacements differ in shape")
    k = len(w)
    if scale is None:
        scale = float(np.ptp(w, axis=0).max()) if k else 0.0
    if k < 3 or scale <= 0:
        raise ValueError("need at least 3 non-collinear control points")
    u = w / scale
    P = np.hstack([np.ones((k, 1)), u])
    if np.linalg.matrix_rank(P) < 3:
        raise ValueError("control points are collinear")
    r = np.sqrt(((u[:, None, :] - u[None, :, :]) ** 2).sum(axis=2))
    L = np.zeros((k + 3, k + 3))
    L[:k, :k] = _tps_kernel(r)
    L[:k, k:] = P
    L[k:, :k] = P.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = (w + d) / scale
    try:
        sol = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("degenerate control grid (singular TPS system)") from None
    return TPSDeformation(w, d, sol[:k], sol[k:], float(scale))


def identity_tps(size: int, grid: int = 5) -> TPSDeformation:
    ctrl = control_grid(size, grid)
    return tps_fit(ctrl, np.zeros_like(ctrl))


def control_grid(size: int, grid: int = 5) -> np.ndarray:
    t = np.linspace(0.0, size - 1.0, grid)
    rr, cc = np.meshgrid(t, t, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def tps_warp(image, t: TPSDeformation) -> np.ndarray:
    """Backward warp: output pixel p samples the input at ``t(p)``.

    Accepts ``(H, W)`` or ``(C, H, W)``; bilinear with replicate padding.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src = t(np.stack([rr.ravel(), cc.ravel()], axis=1))
    coords = src.T.reshape(2, h, w)
    out = np.stack(
        [
            ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="nearest")
            for ch in img
        ]
    ).astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return out[0] if squeeze else out


def random_tps(size: int, magnitude: float, rng: np.random.Generator, grid: int = 5):
    ctrl = control_grid(size, grid)
    disp = rng.uniform(-magnitude, magnitude, size=ctrl.shape) * size
    return tps_fit(ctrl, disp)


def augment_dataset(
    images: np.ndarray,
    labels,
    n_t: int,
    magnitude: float = 0.08,
    seed: int = 0,
    keep_original: bool = True,
    grid: int = 5,
):
    """Add ``n_t`` TPS-deformed copies of every sample.

    Returns ``(images, labels, source_index)``. Originals come first when
    ``keep_original``; the deformed block follows, sample-major. Control
    points move uniformly in ``[-magnitude, magnitude]`` of the window side.
    """
    x = np.asarray(images)
    y = np.asarray(labels)
    if not 0.0 <= magnitude <= 0.25:
        raise ValueError("magnitude must lie in [0, 0.25] of the window")
    if n_t < 0:
        raise ValueError("n_t must be >= 0")
    size = x.shape[-1]
    rng = np.random.Generator(np.random.PCG64(seed))
    out = [x] if keep_original else []
    src = [np.arange(len(x))] if keep_original else []
    if n_t:
        warped = np.empty((len(x) * n_t,) + x.shape[1:], dtype=x.dtype)
        for i in range(len(x)):
            for j in range(n_t):
                warped[i * n_t + j] = tps_warp(x[i], random_tps(size, magnitude, rng, grid))
        out.append(warped)
        src.append(np.repeat(np.arange(len(x)), n_t))
    idx = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    imgs = np.concatenate(out) if out else x[:0]
    return imgs, y[idx], idx


def region_dataset(norm_ct, p0, sp, gids, labels, scales=DEFAULT_SCALES, out: int = 64):
    """Crops for each (superpixel, scale) pair, superpixel-major.

    Returns ``(images, labels, gids, scale_index)``.
    """
    gids = np.asarray(gids, dtype=np.int64)
    bb = region_bboxes(sp)[gids]
    chans = _channels(norm_ct, p0)
    per_scale = [crop_batch(chans, bb, s, out) for s in scales]
    imgs = np.stack(per_scale, axis=1).reshape((-1, len(chans), out, out))
    ns = len(scales)
    return (
        imgs,
        np.repeat(np.asarray(labels, dtype=np.uint8), ns),
        np.repeat(gids, ns),
        np.tile(np.arange(ns), len(gids)),
    )


def classify_regions(
    m: ConvNetModel, norm_ct, p0, sp: SuperpixelMap, candidates, scales=DEFAULT_SCALES
) -> np.ndarray:
    """Per-candidate, per-scale probabilities, shape ``(len(candidates), len(scales))``."""
    want = 1 if p0 is None else 2
    if m.spec.input_shape[0] != want:
        raise ValueError(
            f"model takes {m.spec.input_shape[0]} channels but the inputs provide {want}"
        )
    ids = np.asarray(list(candidates), dtype=np.int64)
    if len(ids) == 0:
        return np.zeros((0, len(scales)))
    out = m.spec.input_shape[1]
    imgs, _, _, _ = region_dataset(norm_ct, p0, sp, ids, np.zeros(len(ids)), scales, out)
    return predict_proba(m, imgs).reshape(len(ids), len(scales))


# --------------------------------------------------------------------------
# record stream: header (magic, version, channels, size, count), then per
# record gid u64, scale u32, label u8, 3 pad bytes, float32 payload


def dumps_records(samples) -> bytes:
    samples = list(samples)
    buf = io.BytesIO()
    c, s = (samples[0].channels.shape[0], samples[0].channels.shape[1]) if samples else (0, 0)
    buf.write(RECORD_MAGIC)
    buf.write(struct.pack("<IIIQ", RECORD_VERSION, c, s, len(samples)))
    for r in samples:
        if r.channels.shape != (c, s, s):
            raise ValueError("all records must share channel count and size")
        label = 255 if r.label is None else int(r.label)
        buf.write(struct.pack("<QIB3x", r.gid, r.scale_index, label))
        buf.write(np.ascontiguousarray(r.channels, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_records(data: bytes) -> list:
    if data[:4] != RECORD_MAGIC:
        raise ValueError("not a region record stream (bad magic)")
    version, c, s, n = struct.unpack_from("<IIIQ", data, 4)
    if version != RECORD_VERSION:
        raise ValueError(f"unsupported record version {version}")
    off = 4 + struct.calcsize("<IIIQ")
    head = struct.calcsize("<QIB3x")
    payload = 4 * c * s * s
    if len(data) != off + n * (head + payload):
        raise ValueError("record stream size does not match its header")
    out = []
    for _ in range(n):
        gid, si, label = struct.unpack_from("<QIB3x", data, off)
        off += head
        ch = np.frombuffer(data, dtype="<f4", count=c * s * s, offset=off).reshape(c, s, s)
        off += payload
        out.append(RegionSample(gid, si, ch.astype(np.float32), None if label == 255 else label))
    return out


def save_records(samples, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_records(samples))


def load_records(path) -> list:
    with open(path, "rb") as f:
        return loads_records(f.read())
