import numpy as np
import pytest
from oracles import gradient_check, random_small_net

from organseg.convnet import (
    Conv,
    Dense,
    Dropout,
    MaxPool,
    NetworkSpec,
    ReLU,
    Softmax,
    default_spec,
    dumps_model,
    first_layer_pgm,
    forward,
    init_model,
    load_model,
    loads_model,
    loss_and_backward,
    predict_proba,
    save_model,
    train_sgd,
)


def tiny_spec(c=1, size=8, seed=0, dropout=0.0):
    return NetworkSpec(
        (c, size, size),
        (Conv(4, 3), ReLU(), MaxPool(2, 2), Dense(8), ReLU(), Dropout(dropout), Dense(2), Softmax()),
        seed,
    )


def zero(model):
    for p in model.params:
        if p is not None:
            p["W"][...] = 0
            p["b"][...] = 0
    return model


def test_zero_weights_give_half(rng):
    m = zero(init_model(tiny_spec()))
    np.testing.assert_allclose(predict_proba(m, rng.normal(size=(5, 1, 8, 8))), 0.5)


def test_softmax_closed_form():
    spec = NetworkSpec((1, 1, 1), (Dense(2), Softmax()))
    m = init_model(spec, np.float64)
    m.params[0]["W"][...] = [[0.0, 1.0]]
    m.params[0]["b"][...] = [0.5, -0.5]
    x = np.array([[[[2.0]]]])
    p = forward(m, x)[0]
    assert p[1] == pytest.approx(1 / (1 + np.exp(0.5 - 1.5)))
    assert p.sum() == pytest.approx(1.0)


def test_full_dropout_is_constant_in_training(rng):
    m = init_model(tiny_spec(dropout=1.0))
    a = forward(m, rng.normal(size=(4, 1, 8, 8)), mode="train")
    b = forward(m, rng.normal(size=(4, 1, 8, 8)), mode="train")
    np.testing.assert_allclose(a, b)
    # inference ignores dropout
    x = rng.normal(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(forward(m, x), forward(m, x, mode="infer"))


@pytest.mark.parametrize("i", range(10))
def test_gradients_match_finite_differences(i):
    rng = np.random.default_rng(100 + i)
    assert gradient_check(random_small_net(rng, seed=i), rng) == []


def test_duplicated_batch_same_gradient(rng):
    m = init_model(tiny_spec(), np.float64)
    x = rng.normal(size=(3, 1, 8, 8))
    y = np.array([0, 1, 1])
    l1, g1 = loss_and_backward(m, x, y, mode="infer")
    l2, g2 = loss_and_backward(m, np.concatenate([x, x]), np.concatenate([y, y]), mode="infer")
    assert l1 == pytest.approx(l2)
    for a, b in zip(g1, g2):
        if a is not None:
            np.testing.assert_allclose(a["W"], b["W"], atol=1e-12)


def _blobs(rng, n):
    x = rng.normal(scale=0.3, size=(n, 1, 8, 8))
    y = rng.integers(0, 2, n)
    x[y == 1, 0, 2:6, 2:6] += 1.5
    return x.astype(np.float32), y


def test_zero_learning_rate_keeps_init(rng):
    x, y = _blobs(rng, 16)
    spec = tiny_spec()
    m = train_sgd(spec, x, y, epochs=2, lr=1e-300, batch_size=4)
    ref = init_model(spec)
    for a, b in zip(m.params, ref.params):
        if a is not None:
            np.testing.assert_array_equal(a["W"], b["W"])


def test_training_deterministic_and_learns(rng):
    x, y = _blobs(rng, 300)
    spec = tiny_spec(seed=3, dropout=0.25)
    m1 = train_sgd(spec, x, y, epochs=6, lr=0.05, batch_size=16, seed=4)
    m2 = train_sgd(spec, x, y, epochs=6, lr=0.05, batch_size=16, seed=4)
    assert dumps_model(m1) == dumps_model(m2)
    hist = m1.meta["loss_history"]
    assert hist[-1] < hist[0]
    xt, yt = _blobs(np.random.default_rng(99), 200)
    assert np.mean((predict_proba(m1, xt) > 0.5) == yt) >= 0.98


def test_maxpool_passes_the_maximum():
    spec = NetworkSpec((1, 4, 4), (MaxPool(2, 2), Dense(2), Softmax()))
    m = init_model(spec, np.float64)
    W = np.zeros((4, 2))
    W[0, 1] = 1.0  # logit 1 reads the top-left pooled cell
    m.params[1]["W"][...] = W
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 0] = 3.0
    p = forward(m, x)[0, 1]
    assert p == pytest.approx(1 / (1 + np.exp(-3.0)))


def test_conv_translation_equivariance(rng):
    spec = NetworkSpec((1, 10, 10), (Conv(2, 3), Dense(2), Softmax()))
    m = init_model(spec, np.float64)
    from organseg.convnet import _check_input, _conv_forward

    x = np.zeros((1, 1, 10, 10))
    x[0, 0, 3:5, 3:5] = rng.normal(size=(2, 2))
    shifted = np.roll(x, (2, 1), axis=(2, 3))
    a, _ = _conv_forward(_check_input(m, x), m.params[0]["W"], m.params[0]["b"], spec.layers[0])
    b, _ = _conv_forward(_check_input(m, shifted), m.params[0]["W"], m.params[0]["b"], spec.layers[0])
    np.testing.assert_allclose(np.roll(a, (2, 1), axis=(1, 2)), b, atol=1e-12)


def test_serialization_roundtrip(tmp_path, rng):
    x, y = _blobs(rng, 32)
    m = train_sgd(tiny_spec(), x, y, epochs=1, batch_size=8)
    save_model(m, tmp_path / "m.cnvn")
    back = load_model(tmp_path / "m.cnvn")
    np.testing.assert_array_equal(predict_proba(back, x), predict_proba(m, x))
    assert back.meta == m.meta
    data = dumps_model(m)
    with pytest.raises(ValueError):
        loads_model(b"NOPE" + data[4:])
    with pytest.raises(ValueError):
        loads_model(data[:-4])


def test_architecture_shared_across_channel_counts():
    specs = [default_spec(c, size=32, widths=(4, 8, 8, 8, 8), fc=16) for c in (1, 2, 3)]
    layers = {s.layers for s in specs}
    assert len(layers) == 1
    assert [s.input_shape[0] for s in specs] == [1, 2, 3]
    assert specs[0].shapes()[-1] == (2,)


def test_spec_validation(rng):
    with pytest.raises(ValueError):
        NetworkSpec((1, 4, 4), (Dense(3), Softmax()))
    with pytest.raises(ValueError):
        NetworkSpec((1, 4, 4), (Dense(2),))
    with pytest.raises(ValueError):
        NetworkSpec((1, 2, 2), (Conv(2, 5, padding="valid"), Dense(2), Softmax()))
    m = init_model(tiny_spec())
    with pytest.raises(ValueError):
        forward(m, rng.normal(size=(1, 2, 8, 8)))
    with pytest.raises(ValueError):
        train_sgd(tiny_spec(), rng.normal(size=(4, 1, 8, 8)), np.zeros(4))


def test_first_layer_pgm():
    m = init_model(tiny_spec())
    data = first_layer_pgm(m, zoom=2)
    head, rest = data.split(b"\n", 1)
    assert head == b"P5"
    dims, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    assert (w, h) == (1 * 7 + 1, 4 * 7 + 1)
    assert len(rest) == len(b"255\n") + w * h
