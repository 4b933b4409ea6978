"""Independent reference implementations shared by unit and acceptance tests."""

import itertools

import numpy as np

from organseg.convnet import (
    Conv,
    Dense,
    Dropout,
    MaxPool,
    NetworkSpec,
    ReLU,
    Softmax,
    init_model,
    loss_and_backward,
)


def random_small_net(rng, seed=0):
    """A random valid layer chain touching every layer type at least sometimes."""
    c = int(rng.integers(1, 4))
    size = int(rng.integers(5, 9))
    layers = []
    h = size
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "pool", "dropout"]) if h >= 2 else "conv"
        if kind == "conv":
            k = int(rng.integers(1, min(3, h) + 1))
            stride = int(rng.integers(1, 3))
            pad = str(rng.choice(["same", "valid"]))
            layers.append(Conv(int(rng.integers(1, 4)), k, stride, pad))
            h = (h - 1) // stride + 1 if pad == "same" else (h - k) // stride + 1
            layers.append(ReLU())
        elif kind == "pool":
            layers.append(MaxPool(2, 2))
            h = (h - 2) // 2 + 1
        else:
            layers.append(Dropout(float(rng.choice([0.0, 0.3, 0.5]))))
    if rng.random() < 0.7:
        layers += [Dense(int(rng.integers(2, 6))), ReLU(), Dropout(0.25)]
    layers += [Dense(2), Softmax()]
    return NetworkSpec((c, size, size), tuple(layers), seed)


def gradient_check(spec, rng, n_batch=3, eps=1e-6, max_entries=30, rel=1e-4, abs_floor=1e-6):
    """Compare analytic parameter and input gradients with central differences.

    Runs in float64 with a fixed dropout mask. Returns the list of mismatches
    as ``(where, analytic, numeric)``.
    """
    model = init_model(spec, np.float64)
    for p in model.params:
        if p is not None:
            p["b"][...] = rng.normal(scale=0.1, size=p["b"].shape)
    x = rng.normal(size=(n_batch,) + spec.input_shape)
    y = rng.integers(0, 2, n_batch)

    def loss():
        return loss_and_backward(model, x, y, "train", 7)[0]

    _, grads, dx = loss_and_backward(model, x, y, "train", 7, return_input_grad=True)
    bad = []

    def probe(arr, g, label):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.size, min(flat.size, max_entries), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = gflat[i]
            if abs(ana - num) > max(rel * max(abs(ana), abs(num)), abs_floor):
                bad.append((f"{label}[{i}]", ana, num))

    for li, (p, g) in enumerate(zip(model.params, grads)):
        if p is None:
            continue
        for key in ("W", "b"):
            probe(p[key], g[key], f"layer{li}.{key}")
    probe(x, dx, "input")
    return bad


def brute_force_optimal_dsc(area, inside):
    """Best DSC over all 2^k subsets of regions (exact rational arithmetic)."""
    from fractions import Fraction

    total = int(sum(inside))
    best, best_sets = Fraction(-1), []
    k = len(area)
    for bits in itertools.product((0, 1), repeat=k):
        sel = sum(a for a, b in zip(area, bits) if b)
        tp = sum(a for a, b in zip(inside, bits) if b)
        den = sel + total
        d = Fraction(1) if den == 0 else Fraction(2 * tp, den)
        if d > best:
            best, best_sets = d, [bits]
        elif d == best:
            best_sets.append(bits)
    return best, best_sets


def direct_gaussian_3d(data, sigma):
    """Direct (non-separable) 3D Gaussian correlation with replicate borders."""
    r = int(np.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kern = g[:, None, None] * g[None, :, None] * g[None, None, :]
    kern /= kern.sum()
    padded = np.pad(np.asarray(data, dtype=np.float64), r, mode="edge")
    out = np.zeros(data.shape)
    for dz, dy, dx in itertools.product(range(2 * r + 1), repeat=3):
        nz, ny, nx = data.shape
        out += kern[dz, dy, dx] * padded[dz : dz + nz, dy : dy + ny, dx : dx + nx]
    return out
