"""Volume data model, MetaImage-subset I/O, slicing and synthetic phantoms.

Arrays are stored as ``(nz, ny, nx)`` in C order, so x varies fastest on disk
and in memory, followed by y, then z (axial-slice-major).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "Mask",
    "PhantomSpec",
    "VolumeFormatError",
    "HeaderError",
    "PayloadSizeError",
    "ElementTypeError",
    "read_volume",
    "read_mask",
    "write_volume",
    "extract_slice",
    "make_phantom",
]

AXES = ("axial", "coronal", "sagittal")

_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_UINT": np.dtype("<u4"),
}
_HEADER_KEYS = (
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "ElementType",
    "ElementByteOrderMSB",
    "ElementDataFile",
)


class VolumeFormatError(ValueError):
    """Base class for volume file problems."""


class HeaderError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    pass


class ElementTypeError(VolumeFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar voxel grid with physical spacing ``(sx, sy, sz)`` in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=self._coerce_dtype(self.data), copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @staticmethod
    def _coerce_dtype(data):
        dt = np.asarray(data).dtype
        if dt in (np.uint8, np.uint32, np.bool_):
            return np.uint32 if dt == np.uint32 else np.uint8
        return np.float32

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class Mask(Volume):
    """Binary voxel mask; data is a ``bool`` array."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            if np.any((data != 0) & (data != 1)):
                raise ValueError("mask values must be 0 or 1")
        super().__post_init__()
        data = self.data.astype(bool)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @staticmethod
    def _coerce_dtype(data):
        return np.bool_

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def with_data(self, data) -> "Mask":
        return Mask(data, self.spacing)


def _raw_path(header_path, name):
    return os.path.join(os.path.dirname(os.path.abspath(header_path)), name)


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as a ``.mhd`` header plus a little-endian ``.raw`` payload.

    Float volumes are written as MET_FLOAT, masks and 8-bit data as MET_UCHAR,
    32-bit label volumes as MET_UINT. NaN payloads are refused.
    """
    path = os.fspath(path)
    data = v.data
    if data.dtype == np.bool_ or data.dtype == np.uint8:
        etype = "MET_UCHAR"
    elif data.dtype == np.uint32:
        etype = "MET_UINT"
    else:
        etype = "MET_FLOAT"
        if np.isnan(data).any():
            raise ValueError("refusing to write a volume containing NaN values")
    payload = np.ascontiguousarray(data, dtype=_ELEMENT_TYPES[etype]).tobytes()
    stem = os.path.splitext(os.path.basename(path))[0]
    raw_name = stem + ".raw"
    nx, ny, nz = v.dims
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {' '.join(repr(float(s)) for s in v.spacing)}\n"
        f"ElementType = {etype}\n"
        "ElementByteOrderMSB = False\n"
        f"ElementDataFile = {raw_name}\n"
    )
    with open(_raw_path(path, raw_name), "wb") as f:
        f.write(payload)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(header)


def _parse_header(path):
    fields = {}
    with open(path, "r", encoding="ascii", errors="replace") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise HeaderError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            if key not in _HEADER_KEYS:
                raise HeaderError(f"{path}:{lineno}: unsupported header key {key!r}")
            if key in fields:
                raise HeaderError(f"{path}:{lineno}: duplicate header key {key!r}")
            fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise HeaderError(f"{path}: missing header keys {missing}")
    if fields["ObjectType"] != "Image":
        raise HeaderError(f"{path}: ObjectType must be Image")
    if fields["NDims"] != "3":
        raise HeaderError(f"{path}: NDims must be 3")
    if fields["ElementByteOrderMSB"] not in ("False", "false"):
        raise HeaderError(f"{path}: only little-endian payloads are supported")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
        spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
    except ValueError as exc:
        raise HeaderError(f"{path}: malformed DimSize/ElementSpacing: {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise HeaderError(f"{path}: DimSize must be three positive integers")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise HeaderError(f"{path}: ElementSpacing must be three positive numbers")
    if fields["ElementType"] not in _ELEMENT_TYPES:
        raise ElementTypeError(f"{path}: unsupported ElementType {fields['ElementType']!r}")
    return dims, spacing, fields["ElementType"], fields["ElementDataFile"]


def read_volume(path) -> Volume:
    """Read a volume written by :func:`write_volume` (or any file in the same subset)."""
    path = os.fspath(path)
    (nx, ny, nz), spacing, etype, raw_name = _parse_header(path)
    dtype = _ELEMENT_TYPES[etype]
    with open(_raw_path(path, raw_name), "rb") as f:
        payload = f.read()
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    return Volume(data.astype(dtype.newbyteorder("=")), spacing)


def read_mask(path) -> Mask:
    v = read_volume(path)
    if v.data.dtype != np.uint8:
        raise ElementTypeError(f"{path}: masks must be stored as MET_UCHAR")
    return Mask(v.data, v.spacing)


def extract_slice(v: Volume, axis: str, index: int) -> np.ndarray:
    """Return one 2D plane of ``v``.

    ``axial`` planes are indexed by z and have shape ``(ny, nx)``; ``coronal``
    by y with shape ``(nz, nx)``; ``sagittal`` by x with shape ``(nz, ny)``.
    Out-of-range indices raise ``IndexError``.
    """
    try:
        dim = {"axial": 0, "coronal": 1, "sagittal": 2}[axis]
    except KeyError:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}") from None
    extent = v.data.shape[dim]
    if not 0 <= index < extent:
        raise IndexError(f"{axis} index {index} outside [0, {extent})")
    return np.take(v.data, index, axis=dim).copy()


# --------------------------------------------------------------------------
# synthetic phantoms

AIR, TISSUE, SPINE, ORGAN = -200.0, 40.0, 250.0, 100.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    organ_count: int = 4
    target_fraction: float = 0.03
    noise_sigma: float = 20.0
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    distractor_contrast: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.target_fraction < 1.0:
            raise ValueError(f"target_fraction must lie in (0, 1), got {self.target_fraction}")
        if self.organ_count < 1:
            raise ValueError("organ_count counts the target organ and must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError("dims must be three extents >= 4")


def _star_section(yy, xx, cy, cx, radius, elong, angle, harmonics):
    """Boolean in-plane region of a perturbed, rotated ellipse."""
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / elong
    w = -sa * dx + ca * dy
    r = np.hypot(u, w)
    theta = np.arctan2(w, u)
    bound = np.ones_like(theta)
    for k, amp, phase in harmonics:
        bound = bound + amp * np.cos(k * theta + phase)
    return r <= radius * bound


def _organ_tube(shape, rng):
    """Parameters of the target organ: a curved tube with irregular sections."""
    nz, ny, nx = shape
    length = int(round(nz * rng.uniform(0.55, 0.75)))
    length = max(2, min(nz, length))
    z0 = int(rng.integers(0, nz - length + 1))
    t = np.linspace(0.0, 1.0, length)
    cx = nx * (0.55 + rng.uniform(-0.06, 0.06)) + nx * 0.12 * np.sin(
        2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi)
    )
    cy = ny * (0.52 + rng.uniform(-0.06, 0.06)) + ny * 0.08 * np.sin(
        2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi)
    )
    profile = 0.45 + 0.55 * np.sin(np.pi * (0.08 + 0.84 * t)) ** 0.7
    profile *= 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 6.3))
    elong = rng.uniform(1.3, 1.9) * (1.0 + 0.2 * np.sin(2 * np.pi * t + rng.uniform(0, 6.3)))
    angle = rng.uniform(-0.4, 0.4) + 0.6 * t * rng.uniform(-1, 1)
    harm = []
    for k in (2, 3, 4):
        amp0, amp1 = rng.uniform(0.05, 0.16, size=2)
        ph0, dph = rng.uniform(0, 2 * np.pi), rng.uniform(-3, 3)
        harm.append((k, amp0 + (amp1 - amp0) * t, ph0 + dph * t))
    return z0, cx, cy, profile, elong, angle, harm


def _paint_tube(shape, params, scale):
    nz, ny, nx = shape
    z0, cx, cy, profile, elong, angle, harm = params
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    out = np.zeros(shape, dtype=bool)
    for i in range(len(profile)):
        h = [(k, amp[i], ph[i]) for k, amp, ph in harm]
        out[z0 + i] = _star_section(yy, xx, cy[i], cx[i], scale * profile[i], elong[i], angle[i], h)
    return out


def _largest_component(mask):
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def make_phantom(spec: PhantomSpec) -> tuple[Volume, Mask]:
    """Generate a deterministic synthetic abdomen-like volume and its target mask.

    The target is one 26-connected, tube-shaped organ whose cross-sections are
    perturbed ellipses varying from slice to slice. ``organ_count - 1``
    distractor blobs with intensities close to the target are placed in the
    body. Each structure draws from its own PCG64 substream of ``spec.seed``.
    """
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    root = np.random.SeedSequence(spec.seed)
    body_ss, organ_ss, noise_ss, *distractor_ss = root.spawn(3 + spec.organ_count - 1)

    rng = np.random.Generator(np.random.PCG64(body_ss))
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    ax, ay = nx * rng.uniform(0.44, 0.48), ny * rng.uniform(0.36, 0.42)
    body2d = ((xx - (nx - 1) / 2) / ax) ** 2 + ((yy - (ny - 1) / 2) / ay) ** 2 <= 1.0
    spine2d = np.hypot(xx - (nx - 1) / 2, yy - (ny - 1) / 2 - 0.26 * ny) <= 0.07 * min(nx, ny)
    clean = np.full(shape, AIR, dtype=np.float64)
    clean[:, body2d] = TISSUE
    clean[:, spine2d] = SPINE
    body = np.broadcast_to(body2d, shape)

    target_count = spec.target_fraction * nx * ny * nz
    orng = np.random.Generator(np.random.PCG64(organ_ss))
    params = _organ_tube(shape, orng)
    lo, hi = 0.5, 0.5 * max(nx, ny)
    organ = _largest_component(_paint_tube(shape, params, hi) & body)
    if organ.sum() < target_count:
        raise ValueError(
            f"target_fraction {spec.target_fraction} is not attainable for dims {spec.dims}"
        )
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        organ = _largest_component(_paint_tube(shape, params, mid) & body)
        if organ.sum() < target_count:
            lo = mid
        else:
            hi = mid
    organ = _largest_component(_paint_tube(shape, params, hi) & body)

    zz = np.arange(nz, dtype=np.float64)[:, None, None]
    for ss in distractor_ss:
        drng = np.random.Generator(np.random.PCG64(ss))
        radius = (target_count / max(1, len(distractor_ss))) ** (1 / 3) * drng.uniform(0.7, 1.1)
        rz = radius * drng.uniform(0.6, 1.0) * spec.spacing[0] / spec.spacing[2] * 2
        cz = drng.uniform(0.15, 0.85) * (nz - 1)
        ang = drng.uniform(0, 2 * np.pi)
        dist = drng.uniform(0.15, 0.32)
        cx = (nx - 1) / 2 + np.cos(ang) * dist * nx
        cy = (ny - 1) / 2 + np.sin(ang) * dist * ny
        harm = [(k, drng.uniform(0.0, 0.12), drng.uniform(0, 2 * np.pi)) for k in (2, 3)]
        blob = np.zeros(shape, dtype=bool)
        for z in range(nz):
            frac = 1.0 - ((z - cz) / max(rz, 1.0)) ** 2
            if frac <= 0:
                continue
            blob[z] = _star_section(yy, xx, cy, cx, radius * np.sqrt(frac), drng.uniform(0.9, 1.2), ang, harm)
        level = ORGAN + drng.choice([-1.0, 1.0]) * spec.distractor_contrast * drng.uniform(0.6, 1.2)
        clean[blob & body & ~organ] = level
    del zz
    clean[organ] = ORGAN

    nrng = np.random.Generator(np.random.PCG64(noise_ss))
    if spec.noise_sigma > 0:
        clean = clean + nrng.normal(0.0, spec.noise_sigma, size=shape)
    return Volume(clean.astype(np.float32), spec.spacing), Mask(organ, spec.spacing)
