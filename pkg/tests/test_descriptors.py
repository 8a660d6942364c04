import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvmatch.descriptors import (
    DESCRIPTOR_DIM,
    FEATURE_RECORD,
    DescriptorSet,
    load_descriptor_set,
    save_descriptor_set,
)
from uvmatch.exceptions import (
    BadDimensionError,
    MalformedHeaderError,
    TruncatedFileError,
)


def make_set(n, image_id=7, seed=0, width=640, height=480):
    rng = np.random.default_rng(seed)
    kp = np.column_stack(
        [
            rng.uniform(0, width, n).astype(np.float32),
            rng.uniform(0, height, n).astype(np.float32),
            rng.uniform(0.5, 8.0, n).astype(np.float32),
            rng.uniform(0, 6.28, n).astype(np.float32),
        ]
    )
    desc = rng.integers(0, 256, size=(n, DESCRIPTOR_DIM), dtype=np.uint8)
    return DescriptorSet(image_id, width, height, kp, desc)


def test_roundtrip_small(tmp_path):
    dset = make_set(3)
    path = tmp_path / "a.uvd"
    save_descriptor_set(dset, path)
    loaded = load_descriptor_set(path)
    assert loaded == dset


def test_roundtrip_empty(tmp_path):
    dset = make_set(0)
    path = tmp_path / "empty.uvd"
    save_descriptor_set(dset, path)
    loaded = load_descriptor_set(path)
    assert loaded == dset
    assert len(loaded) == 0


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 40), seed=st.integers(0, 2**31))
def test_roundtrip_random(tmp_path_factory, n, seed):
    dset = make_set(n, seed=seed)
    path = tmp_path_factory.mktemp("rt") / "x.uvd"
    save_descriptor_set(dset, path)
    assert load_descriptor_set(path) == dset


def test_sorted_by_scale_descending():
    dset = make_set(100, seed=3)
    scales = dset.keypoints[:, 2]
    assert np.all(np.diff(scales) <= 0)


def test_stable_tie_order():
    # Two features with equal scale keep their construction order.
    kp = np.array(
        [
            [1.0, 1.0, 2.0, 0.0],
            [2.0, 2.0, 5.0, 0.0],
            [3.0, 3.0, 2.0, 0.0],
        ],
        dtype=np.float32,
    )
    desc = np.arange(3 * DESCRIPTOR_DIM, dtype=np.uint8).reshape(3, DESCRIPTOR_DIM) % 7
    dset = DescriptorSet(1, 10, 10, kp, desc)
    assert dset.keypoints[0, 0] == 2.0
    assert dset.keypoints[1, 0] == 1.0  # first of the tied pair
    assert dset.keypoints[2, 0] == 3.0


def test_cap_keeps_largest_scales(tmp_path):
    dset = make_set(10000, seed=11)
    path = tmp_path / "big.uvd"
    save_descriptor_set(dset, path)
    loaded = load_descriptor_set(path, cap=8192)
    assert len(loaded) == 8192
    # Oracle: full sort of all scales; kept features must dominate the
    # dropped ones.
    all_scales = np.sort(dset.keypoints[:, 2])[::-1]
    dropped_max = all_scales[8192:].max()
    assert loaded.keypoints[:, 2].min() >= dropped_max
    np.testing.assert_array_equal(
        np.sort(loaded.keypoints[:, 2])[::-1], all_scales[:8192]
    )


def test_cap_noop_below_cap(tmp_path):
    dset = make_set(50)
    path = tmp_path / "s.uvd"
    save_descriptor_set(dset, path)
    assert len(load_descriptor_set(path, cap=8192)) == 50


def test_bad_magic(tmp_path):
    dset = make_set(2)
    path = tmp_path / "m.uvd"
    save_descriptor_set(dset, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        load_descriptor_set(path)


def test_bad_version(tmp_path):
    dset = make_set(2)
    path = tmp_path / "v.uvd"
    save_descriptor_set(dset, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        load_descriptor_set(path)


def test_short_header(tmp_path):
    path = tmp_path / "short.uvd"
    path.write_bytes(b"UVD1\x01")
    with pytest.raises(MalformedHeaderError):
        load_descriptor_set(path)


def test_bad_dimension_field(tmp_path):
    dset = make_set(2)
    path = tmp_path / "d.uvd"
    save_descriptor_set(dset, path)
    blob = bytearray(path.read_bytes())
    blob[28:32] = (64).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(BadDimensionError):
        load_descriptor_set(path)


def test_truncated_payload(tmp_path):
    dset = make_set(5)
    path = tmp_path / "t.uvd"
    save_descriptor_set(dset, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - FEATURE_RECORD.itemsize - 3])
    with pytest.raises(TruncatedFileError):
        load_descriptor_set(path)


def test_trailing_bytes_rejected(tmp_path):
    dset = make_set(5)
    path = tmp_path / "tr.uvd"
    save_descriptor_set(dset, path)
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(TruncatedFileError):
        load_descriptor_set(path)


def test_save_unwritable(tmp_path):
    dset = make_set(1)
    with pytest.raises(OSError):
        save_descriptor_set(dset, tmp_path / "no" / "such" / "dir" / "f.uvd")


def test_constructor_rejects_bad_input():
    good_kp = np.ones((2, 4), dtype=np.float32)
    good_desc = np.zeros((2, DESCRIPTOR_DIM), dtype=np.uint8)
    with pytest.raises(BadDimensionError):
        DescriptorSet(1, 10, 10, good_kp, np.zeros((2, 64), dtype=np.uint8))
    with pytest.raises(BadDimensionError):
        DescriptorSet(1, 10, 10, good_kp, good_desc.astype(np.float32))
    with pytest.raises(BadDimensionError):
        DescriptorSet(1, 10, 10, np.ones((3, 4), dtype=np.float32), good_desc)
    with pytest.raises(BadDimensionError):
        DescriptorSet(1, 0, 10, good_kp, good_desc)
    with pytest.raises(ValueError):
        DescriptorSet(-1, 10, 10, good_kp, good_desc)
    bad_scale = good_kp.copy()
    bad_scale[0, 2] = 0.0
    with pytest.raises(ValueError):
        DescriptorSet(1, 10, 10, bad_scale, good_desc)


def test_unit_descriptors():
    dset = make_set(20, seed=5)
    U = dset.unit_descriptors()
    assert U.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-6)

    kp = np.array([[1.0, 1.0, 2.0, 0.0]], dtype=np.float32)
    zero = DescriptorSet(1, 10, 10, kp, np.zeros((1, DESCRIPTOR_DIM), np.uint8))
    assert np.all(zero.unit_descriptors() == 0.0)


def test_immutable_arrays():
    dset = make_set(4)
    with pytest.raises(ValueError):
        dset.keypoints[0, 0] = 1.0
    with pytest.raises(ValueError):
        dset.descriptors[0, 0] = 1
