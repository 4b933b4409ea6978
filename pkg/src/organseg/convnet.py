"""Small deterministic ConvNet engine: forward, backward and SGD in numpy.

Tensors are ``(batch, channels, height, width)``. A network is an ordered
tuple of layer specs ending in a two-way softmax; column 1 of the output is
the positive (organ) class.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"CNVN"
VERSION = 1


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: str = "same"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, MaxPool, Dense, Dropout, ReLU, Softmax)}


def _same_pad(k):
    return (k - 1) // 2, k - 1 - (k - 1) // 2


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (channels, height, width)
    layers: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self):
        """Output shape after every layer; validates the chain."""
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("the final layer must be a two-way Softmax")
        shape = self.input_shape
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W), got {shape}")
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: convolution after a flat layer")
                c, h, w = shape
                k, s = layer.kernel, layer.stride
                if layer.padding == "same":
                    ph, pw = sum(_same_pad(k)), sum(_same_pad(k))
                elif layer.padding == "valid":
                    ph = pw = 0
                else:
                    raise ValueError(f"layer {i}: padding must be 'same' or 'valid'")
                ho, wo = (h + ph - k) // s + 1, (w + pw - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ValueError(f"layer {i}: kernel {k} does not fit input {shape}")
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: pooling after a flat layer")
                c, h, w = shape
                ho = (h - layer.window) // layer.stride + 1
                wo = (w - layer.window) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ValueError(f"layer {i}: pool window does not fit input {shape}")
                shape = (c, ho, wo)
            elif isinstance(layer, Dense):
                shape = (layer.width,)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate <= 1.0:
                    raise ValueError(f"layer {i}: dropout rate must lie in [0, 1]")
            elif isinstance(layer, Softmax):
                if i != len(self.layers) - 1:
                    raise ValueError("Softmax must be the final layer")
                if int(np.prod(shape)) != 2:
                    raise ValueError("Softmax must receive exactly two logits")
                shape = (2,)
            elif not isinstance(layer, ReLU):
                raise TypeError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    def with_channels(self, channels: int) -> "NetworkSpec":
        return NetworkSpec((channels,) + self.input_shape[1:], self.layers, self.seed)

    def to_json(self):
        return {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_json(cls, obj):
        layers = []
        for item in obj["layers"]:
            item = dict(item)
            layers.append(_LAYER_TYPES[item.pop("type")](**item))
        return cls(tuple(obj["input_shape"]), tuple(layers), int(obj["seed"]))


def default_spec(
    in_channels: int,
    size: int = 64,
    widths=(16, 32, 32, 32, 32),
    kernels=(5, 5, 3, 3, 3),
    fc: int = 128,
    dropout: float = 0.5,
    seed: int = 0,
) -> NetworkSpec:
    """The shared five-convolution template; only ``in_channels`` differs between uses."""
    w, k = widths, kernels
    layers = (
        Conv(w[0], k[0]), ReLU(), MaxPool(2, 2),
        Conv(w[1], k[1]), ReLU(), MaxPool(2, 2),
        Conv(w[2], k[2]), ReLU(),
        Conv(w[3], k[3]), ReLU(),
        Conv(w[4], k[4]), ReLU(), MaxPool(2, 2),
        Dense(fc), ReLU(), Dropout(dropout),
        Dense(2), Softmax(),
    )  # fmt: skip
    return NetworkSpec((in_channels, size, size), layers, seed)


@dataclass
class ConvNetModel:
    spec: NetworkSpec
    params: list  # per layer: {"W": ..., "b": ...} or None
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p["W"].dtype
        return np.dtype(np.float32)

    def copy(self) -> "ConvNetModel":
        params = [None if p is None else {k: a.copy() for k, a in p.items()} for p in self.params]
        return ConvNetModel(self.spec, params, json.loads(json.dumps(self.meta)))


def init_model(spec: NetworkSpec, dtype=np.float32) -> ConvNetModel:
    """Uniform fan-in initialisation, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = []
    shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel * layer.kernel
            lim = math.sqrt(6.0 / fan_in)
            W = rng.uniform(-lim, lim, size=(layer.out_channels, shape[0], layer.kernel, layer.kernel))
            params.append({"W": W.astype(dtype), "b": np.zeros(layer.out_channels, dtype=dtype)})
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(shape))
            lim = math.sqrt(6.0 / fan_in)
            W = rng.uniform(-lim, lim, size=(fan_in, layer.width))
            params.append({"W": W.astype(dtype), "b": np.zeros(layer.width, dtype=dtype)})
        else:
            params.append(None)
        shape = out_shape
    return ConvNetModel(spec, params, {})


# --------------------------------------------------------------------------
# layer kernels


def _conv_forward(x, W, b, layer):
    # x is NHWC; W is (F, C, k, k)
    k, s = layer.kernel, layer.stride
    if layer.padding == "same":
        lo, hi = _same_pad(k)
        xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    else:
        lo = 0
        xp = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]  # (N, Ho, Wo, C, k, k)
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    out = cols @ W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1).T
    out += b
    return out.reshape(n, ho, wo, -1), (xp.shape, cols, lo)


def _conv_backward(dout, cache, W, layer, need_dx=True):
    xp_shape, cols, lo = cache
    k, s = layer.kernel, layer.stride
    n, ho, wo, f = dout.shape
    d2 = dout.reshape(-1, f)
    db = d2.sum(axis=0)
    # columns are ordered (ky, kx, c)
    dW = (d2.T @ cols).reshape(f, k, k, -1).transpose(0, 3, 1, 2)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, ho, wo, k, k, -1)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, :, i, j]
    if layer.padding == "same":
        hi = k - 1 - lo
        return dxp[:, lo : xp_shape[1] - hi, lo : xp_shape[2] - hi], dW, db
    return dxp, dW, db


def _pool_forward(x, layer):
    w, s = layer.window, layer.stride
    win = sliding_window_view(x, (w, w), axis=(1, 2))[:, ::s, ::s]  # (N, Ho, Wo, C, w, w)
    flat = win.reshape(win.shape[:4] + (w * w,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(dout, cache, layer):
    x_shape, arg = cache
    w, s = layer.window, layer.stride
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(w):
        for j in range(w):
            sel = arg == i * w + j
            dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dout * sel
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _run(model, x, mode, rng):
    caches = []
    h = x
    for layer, p in zip(model.spec.layers, model.params):
        if isinstance(layer, Conv):
            h, c = _conv_forward(h, p["W"], p["b"], layer)
        elif isinstance(layer, MaxPool):
            h, c = _pool_forward(h, layer)
        elif isinstance(layer, Dense):
            c = h.shape
            flat = h.reshape(h.shape[0], -1)
            h, c = flat @ p["W"] + p["b"], (c, flat)
        elif isinstance(layer, ReLU):
            c = h > 0
            h = h * c
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.rate > 0:
                if layer.rate >= 1.0:
                    c = np.zeros(h.shape, dtype=h.dtype)
                else:
                    keep = rng.random(h.shape) >= layer.rate
                    c = keep.astype(h.dtype) / h.dtype.type(1.0 - layer.rate)
                h = h * c
            else:
                c = None
        else:  # Softmax
            c = None
            h = _softmax(h.reshape(h.shape[0], -1))
        caches.append(c)
    return h, caches


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise ValueError(
            f"batch shape {x.shape} does not match network input {model.spec.input_shape}"
        )
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=model.dtype)


def _dropout_rng(dropout_seed):
    if isinstance(dropout_seed, np.random.Generator):
        return dropout_seed
    return np.random.Generator(np.random.PCG64(dropout_seed))


def forward(model: ConvNetModel, batch, mode: str = "infer", dropout_seed=0) -> np.ndarray:
    """Class-probability pairs ``(p_negative, p_positive)``, shape ``(N, 2)``.

    Dropout is active only with ``mode="train"`` and uses inverted scaling, so
    inference needs no rescaling.
    """
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    x = _check_input(model, batch)
    probs, _ = _run(model, x, mode, _dropout_rng(dropout_seed) if mode == "train" else None)
    return probs


def predict_proba(model: ConvNetModel, batch, batch_size: int = 256) -> np.ndarray:
    """Positive-class probability for every sample, evaluated in chunks."""
    x = np.asarray(batch)
    out = np.empty(len(x), dtype=np.float64)
    for i in range(0, len(x), batch_size):
        out[i : i + batch_size] = forward(model, x[i : i + batch_size])[:, 1]
    return out


def loss_and_backward(
    model: ConvNetModel,
    batch,
    labels,
    mode: str = "train",
    dropout_seed=0,
    return_input_grad: bool = False,
):
    """Mean two-class cross-entropy and its gradient for every parameter.

    Returns ``(loss, grads)`` where ``grads`` parallels ``model.params``; with
    ``return_input_grad`` the input gradient is appended as a third item.
    """
    x = _check_input(model, batch)
    y = np.asarray(labels).astype(np.int64).ravel()
    if len(y) != len(x):
        raise ValueError("one label per sample required")
    rng = _dropout_rng(dropout_seed) if mode == "train" else None
    probs, caches = _run(model, x, mode, rng)
    n = len(y)
    picked = probs[np.arange(n), y]
    tiny = np.finfo(probs.dtype).tiny
    loss = float(-np.mean(np.log(np.maximum(picked, tiny))))
    d = probs.copy()
    d[np.arange(n), y] -= 1
    d /= n
    grads = [None] * len(model.params)
    layers = model.spec.layers
    for i in range(len(layers) - 2, -1, -1):
        layer, c, p = layers[i], caches[i], model.params[i]
        if isinstance(layer, Conv):
            d, dW, db = _conv_backward(d, c, p["W"], layer, need_dx=i > 0 or return_input_grad)
            grads[i] = {"W": dW, "b": db}
        elif isinstance(layer, MaxPool):
            d = _pool_backward(d, c, layer)
        elif isinstance(layer, Dense):
            in_shape, flat = c
            grads[i] = {"W": flat.T @ d, "b": d.sum(axis=0)}
            d = (d @ p["W"].T).reshape(in_shape)
        elif isinstance(layer, ReLU):
            d = d * c
        elif isinstance(layer, Dropout):
            if c is not None:
                d = d * c
    if return_input_grad:
        return loss, grads, d.transpose(0, 3, 1, 2)
    return loss, grads


# --------------------------------------------------------------------------
# training


def train_sgd(
    spec: NetworkSpec,
    images,
    labels,
    epochs: int = 10,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
    lr_step: int | None = None,
    lr_gamma: float = 0.1,
    weight_decay: float = 0.0,
    dtype=np.float32,
    log=None,
) -> ConvNetModel:
    """Mini-batch SGD with momentum and a step-decay learning-rate schedule.

    The rate is multiplied by ``lr_gamma`` every ``lr_step`` epochs (default:
    two thirds of the run). Shuffling and dropout masks come from ``seed``;
    weight initialisation from ``spec.seed``.
    """
    X = np.ascontiguousarray(images, dtype=dtype)
    y = np.asarray(labels).astype(np.int64).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("need a non-empty dataset with one label per sample")
    if np.unique(y).size < 2:
        raise ValueError("training data contains a single class")
    if lr_step is None:
        lr_step = max(1, (2 * epochs) // 3)
    model = init_model(spec, dtype)
    velocity = [None if p is None else {k: np.zeros_like(a) for k, a in p.items()} for p in model.params]
    ss_shuffle, ss_drop = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(ss_shuffle))
    drop_rng = np.random.Generator(np.random.PCG64(ss_drop))
    history = []
    for epoch in range(epochs):
        rate = lr * lr_gamma ** (epoch // lr_step)
        order = shuffle_rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_backward(model, X[idx], y[idx], "train", drop_rng)
            total += loss * len(idx)
            for p, g, vel in zip(model.params, grads, velocity):
                if p is None:
                    continue
                for key in p:
                    step = g[key].astype(dtype, copy=False)
                    if weight_decay and key == "W":
                        step = step + dtype(weight_decay) * p[key]
                    vel[key] *= dtype(momentum)
                    vel[key] -= dtype(rate) * step
                    p[key] += vel[key]
        history.append(total / len(X))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} lr={rate:.3g} loss={history[-1]:.4f}")
    model.meta = {
        "epochs": epochs,
        "lr": lr,
        "lr_step": lr_step,
        "lr_gamma": lr_gamma,
        "momentum": momentum,
        "batch_size": batch_size,
        "seed": seed,
        "weight_decay": weight_decay,
        "n_samples": int(len(X)),
        "loss_history": [float(h) for h in history],
    }
    return model


# --------------------------------------------------------------------------
# serialization: magic, version, JSON header length, JSON (spec + metadata),
# then each layer's W and b as little-endian float32 in layer order


def dumps_model(model: ConvNetModel) -> bytes:
    header = json.dumps(
        {"spec": model.spec.to_json(), "meta": model.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    for p in model.params:
        if p is not None:
            buf.write(np.ascontiguousarray(p["W"], dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(p["b"], dtype="<f4").tobytes())
    return buf.getvalue()


def loads_model(data: bytes) -> ConvNetModel:
    if data[:4] != MAGIC:
        raise ValueError("not a ConvNet model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported model version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    spec = NetworkSpec.from_json(header["spec"])
    model = init_model(spec, np.float32)
    off = 12 + hlen
    for p in model.params:
        if p is None:
            continue
        for key in ("W", "b"):
            n = p[key].size
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
            p[key] = arr.reshape(p[key].shape).astype(np.float32)
            off += 4 * n
    if off != len(data):
        raise ValueError("model file size does not match its spec")
    model.meta = header["meta"]
    return model


def save_model(model: ConvNetModel, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_model(model))


def load_model(path) -> ConvNetModel:
    with open(path, "rb") as f:
        return loads_model(f.read())


def first_layer_pgm(model: ConvNetModel, zoom: int = 4) -> bytes:
    """First-layer kernels as a binary PGM grid: one row per filter, one column per channel."""
    idx = next((i for i, l in enumerate(model.spec.layers) if isinstance(l, Conv)), None)
    if idx is None:
        raise ValueError("model has no convolution layer")
    W = np.asarray(model.params[idx]["W"], dtype=np.float64)
    f, c, k, _ = W.shape
    lo, hi = W.min(), W.max()
    scaled = np.zeros_like(W) if hi == lo else (W - lo) / (hi - lo)
    cell = k * zoom
    img = np.full((f * (cell + 1) + 1, c * (cell + 1) + 1), 255, dtype=np.uint8)
    for i in range(f):
        for j in range(c):
            tile = np.kron(scaled[i, j], np.ones((zoom, zoom)))
            y0, x0 = 1 + i * (cell + 1), 1 + j * (cell + 1)
            img[y0 : y0 + cell, x0 : x0 + cell] = np.rint(tile * 254).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()
