import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from organseg.volume import (
    ElementTypeError,
    HeaderError,
    Mask,
    PayloadSizeError,
    PhantomSpec,
    Volume,
    extract_slice,
    make_phantom,
    read_mask,
    read_volume,
    write_volume,
)


def _write_raw(tmp_path, header, payload):
    (tmp_path / "v.mhd").write_text(header)
    (tmp_path / "v.raw").write_bytes(payload)
    return tmp_path / "v.mhd"


HEADER = (
    "ObjectType = Image\nNDims = 3\nDimSize = {dims}\nElementSpacing = 1 1 1\n"
    "ElementType = {etype}\nElementByteOrderMSB = False\nElementDataFile = v.raw\n"
)


def test_read_explicit_payload(tmp_path):
    p = _write_raw(
        tmp_path,
        HEADER.format(dims="2 2 1", etype="MET_FLOAT"),
        np.array([0, 1, 2, 3], dtype="<f4").tobytes(),
    )
    v = read_volume(p)
    assert v.dims == (2, 2, 1)
    assert v.shape == (1, 2, 2)
    # x varies fastest
    np.testing.assert_array_equal(v.data[0], [[0, 1], [2, 3]])


def test_payload_size_mismatch(tmp_path):
    p = _write_raw(
        tmp_path,
        HEADER.format(dims="2 2 2", etype="MET_FLOAT"),
        np.zeros(4, dtype="<f4").tobytes(),
    )
    with pytest.raises(PayloadSizeError):
        read_volume(p)


def test_unknown_element_type(tmp_path):
    p = _write_raw(tmp_path, HEADER.format(dims="1 1 1", etype="MET_DOUBLE"), b"\0" * 8)
    with pytest.raises(ElementTypeError):
        read_volume(p)


@pytest.mark.parametrize(
    "bad",
    [
        "NDims = 3\n",  # missing keys
        HEADER.format(dims="1 1 1", etype="MET_FLOAT") + "Offset = 0 0 0\n",
        HEADER.format(dims="1 1 1", etype="MET_FLOAT") + "NDims = 3\n",
        HEADER.format(dims="1 1", etype="MET_FLOAT"),
        HEADER.format(dims="1 1 1", etype="MET_FLOAT").replace("= False", "= True"),
    ],
)
def test_header_errors(tmp_path, bad):
    p = _write_raw(tmp_path, bad, b"\0" * 4)
    with pytest.raises(HeaderError):
        read_volume(p)


def test_roundtrip_float(tmp_path, rng):
    v = Volume(rng.normal(size=(3, 4, 5)), (0.7, 0.8, 2.5))
    write_volume(v, tmp_path / "a.mhd")
    assert read_volume(tmp_path / "a.mhd") == v


def test_roundtrip_mask_uchar(tmp_path, rng):
    m = Mask(rng.random((2, 3, 4)) > 0.5, (1, 1, 2))
    write_volume(m, tmp_path / "m.mhd")
    assert "MET_UCHAR" in (tmp_path / "m.mhd").read_text()
    back = read_mask(tmp_path / "m.mhd")
    assert isinstance(back, Mask)
    np.testing.assert_array_equal(back.data, m.data)


def test_roundtrip_uint32(tmp_path):
    v = Volume(np.arange(24, dtype=np.uint32).reshape(2, 3, 4) * 1000)
    write_volume(v, tmp_path / "l.mhd")
    assert read_volume(tmp_path / "l.mhd") == v


def test_nan_rejected(tmp_path):
    d = np.zeros((1, 2, 2), dtype=np.float32)
    d[0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        write_volume(Volume(d), tmp_path / "n.mhd")
    assert not (tmp_path / "n.mhd").exists()


def test_invalid_volumes():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1)), (1, 0, 1))
    with pytest.raises(ValueError):
        Mask(np.full((1, 1, 2), 2, dtype=np.uint8))


@given(
    arrays(
        np.float32,
        st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
        elements=st.floats(-1e6, 1e6, width=32),
    ),
    st.tuples(*[st.floats(0.1, 5.0)] * 3),
)
def test_roundtrip_property(tmp_path_factory, data, spacing):
    d = tmp_path_factory.mktemp("rt")
    v = Volume(data, spacing)
    write_volume(v, d / "v.mhd")
    assert read_volume(d / "v.mhd") == v


def test_extract_single_voxel():
    v = Volume(np.full((1, 1, 1), 5.0))
    for axis in ("axial", "coronal", "sagittal"):
        np.testing.assert_array_equal(extract_slice(v, axis, 0), [[5.0]])


def test_extract_index_arithmetic():
    z, y, x = np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij")
    v = Volume((x + 10 * y + 100 * z).astype(np.float32))
    img = extract_slice(v, "axial", 2)
    i, j = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    # img[row=y, col=x]
    np.testing.assert_array_equal(img, j + 10 * i + 200)
    with pytest.raises(IndexError):
        extract_slice(v, "axial", 3)
    with pytest.raises(ValueError):
        extract_slice(v, "oblique", 0)


@pytest.mark.parametrize("axis,dim", [("axial", 0), ("coronal", 1), ("sagittal", 2)])
def test_slices_restack(rng, axis, dim):
    v = Volume(rng.normal(size=(3, 4, 5)))
    planes = [extract_slice(v, axis, i) for i in range(v.shape[dim])]
    np.testing.assert_array_equal(np.stack(planes, axis=dim), v.data)


def test_phantom_deterministic():
    spec = PhantomSpec(seed=3, dims=(32, 32, 8))
    v1, m1 = make_phantom(spec)
    v2, m2 = make_phantom(spec)
    assert v1 == v2 and m1 == m2
    v3, _ = make_phantom(PhantomSpec(seed=4, dims=(32, 32, 8)))
    assert not v1 == v3


def test_phantom_target_fraction():
    _, m = make_phantom(PhantomSpec(seed=0, target_fraction=0.005, dims=(64, 64, 64)))
    assert 655 <= m.count <= 1966


def test_phantom_noise_free_piecewise_constant():
    v, m = make_phantom(PhantomSpec(seed=1, noise_sigma=0.0, dims=(32, 32, 8)))
    assert len(np.unique(v.data)) <= 8
    assert np.all(v.data[m.data] == v.data[m.data][0])
    assert m.shape == v.shape and m.spacing == v.spacing
