import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from qsentry import data
from qsentry.errors import ConfigError, DomainError, FormatError, LengthError, ShapeError
from tests.conftest import needs_mnist
from tests.oracles import idx_bytes


def reference_idx_reader(raw: bytes):
    """Byte-at-a-time IDX reader kept deliberately naive."""
    assert raw[0] == 0 and raw[1] == 0 and raw[2] == 0x08
    rank = raw[3]
    dims = [struct.unpack(">I", raw[4 + 4 * k: 8 + 4 * k])[0] for k in range(rank)]
    body = raw[4 + 4 * rank:]
    flat = [body[i] for i in range(int(np.prod(dims)))]
    return np.array(flat, dtype=np.uint8).reshape(dims)


# -- IDX --------------------------------------------------------------------


def test_hand_built_label_file():
    raw = bytes.fromhex("00000801") + (3).to_bytes(4, "big") + bytes([1, 7, 1])
    got = data.parse_idx(raw)
    assert got.tolist() == [1, 7, 1]
    np.testing.assert_array_equal(got, reference_idx_reader(raw))


def test_hand_built_image_file():
    pix = np.arange(2 * 3 * 4, dtype=np.uint8)
    raw = idx_bytes(0x08, (2, 3, 4), pix.tobytes())
    got = data.parse_idx(raw)
    assert got.shape == (2, 3, 4)
    np.testing.assert_array_equal(got, reference_idx_reader(raw))


def test_gzip_input():
    raw = idx_bytes(0x08, (4,), bytes([0, 1, 7, 9]))
    assert data.parse_idx(gzip.compress(raw)).tolist() == [0, 1, 7, 9]


def test_wrong_magic():
    with pytest.raises(FormatError):
        data.parse_idx(bytes.fromhex("00000901") + (1).to_bytes(4, "big") + b"\x01")
    with pytest.raises(FormatError):
        data.parse_idx(bytes.fromhex("00000802") + (1).to_bytes(4, "big") * 2 + b"\x01")


def test_truncation():
    raw = idx_bytes(0x08, (5,), bytes([1, 2, 3]))
    with pytest.raises(LengthError):
        data.parse_idx(raw)
    with pytest.raises(LengthError):
        data.parse_idx(bytes.fromhex("000008"))
    with pytest.raises(LengthError):
        data.parse_idx(bytes.fromhex("00000803") + b"\x00\x00\x00\x01")


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        data.parse_idx(idx_bytes(0x08, (1,), bytes([1, 2])))


@given(hnp.arrays(np.uint8, st.one_of(
    st.tuples(st.integers(0, 20)),
    st.tuples(st.integers(0, 3), st.integers(1, 5), st.integers(1, 5)),
)))
@settings(max_examples=50)
def test_idx_round_trip(arr):
    raw = data.write_idx(arr)
    parsed = data.parse_idx(raw)
    np.testing.assert_array_equal(parsed, arr)
    assert data.write_idx(parsed) == raw


def test_write_idx_rejects_other_dtypes():
    with pytest.raises(FormatError):
        data.write_idx(np.zeros(3, dtype=np.int32))
    with pytest.raises(ShapeError):
        data.write_idx(np.zeros((2, 2), dtype=np.uint8))


def test_load_idx_finds_gz_sibling(tmp_path):
    raw = idx_bytes(0x08, (2,), bytes([1, 7]))
    (tmp_path / "labels.gz").write_bytes(gzip.compress(raw))
    assert data.load_idx(tmp_path / "labels").tolist() == [1, 7]


# -- filtering and preprocessing ----------------------------------------------


def test_filter_binary_example():
    imgs = np.arange(4)
    _, classes, idx = data.filter_binary(imgs, np.array([1, 2, 7, 7]))
    assert idx.tolist() == [0, 2, 3]
    assert classes.tolist() == [0, 1, 1]


def test_filter_binary_empty_and_mismatch():
    with pytest.raises(DomainError):
        data.filter_binary(np.zeros(3), np.zeros(3, dtype=int))
    with pytest.raises(ShapeError):
        data.filter_binary(np.zeros(3), np.zeros(2, dtype=int))


def test_preprocess_examples():
    zero = data.preprocess(np.zeros((28, 28)))
    assert zero.shape == (256,)
    np.testing.assert_array_equal(zero, np.full(256, 1e-6))
    np.testing.assert_array_equal(data.preprocess(np.full((28, 28), 255)), np.ones(256))
    img = np.zeros((28, 28))
    img[6, 6] = 255
    out = data.preprocess(img)
    assert out[0] == 1.0 and np.count_nonzero(out) == 1


def test_preprocess_row_major():
    img = np.zeros((28, 28))
    img[7, 9] = 255  # row 1, column 3 of the crop
    assert np.flatnonzero(data.preprocess(img)).tolist() == [1 * 16 + 3]


@given(hnp.arrays(np.uint8, (28, 28)), st.sampled_from(["center", "downscale"]))
@settings(max_examples=30)
def test_preprocess_range_and_length(img, crop):
    out = data.preprocess(img, crop)
    assert out.shape == (256,)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_errors():
    with pytest.raises(ShapeError):
        data.preprocess(np.zeros((16, 16)))
    with pytest.raises(ConfigError):
        data.preprocess(np.zeros((28, 28)), crop="random")


def test_raw_image_invariants():
    with pytest.raises(ShapeError):
        data.RawImage(np.zeros((27, 28)), 1)
    with pytest.raises(DomainError):
        data.RawImage(np.zeros((28, 28)), 10)


def test_labeled_sample_invariants():
    with pytest.raises(DomainError):
        data.LabeledSample(np.zeros(256), 0, 1, False)
    s = data.LabeledSample(np.zeros(256), 0, 0).poisoned(np.ones(256), 1)
    assert s.is_poisoned and s.train_label == 1 and s.true_label == 0


# -- split ------------------------------------------------------------------


def test_split_sizes_and_partition():
    items = list(range(100))
    a, b = data.split(items, 0.8, seed=0)
    assert len(a) == 80 and len(b) == 20
    assert sorted(a + b) == items
    assert data.split(items, 0.8, seed=0) == (a, b)


def test_split_seeds_differ():
    items = list(range(100))
    parts = {tuple(data.split(items, 0.8, seed=s)[0]) for s in range(20)}
    assert len(parts) == 20


def test_split_fraction_checked():
    for frac in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            data.split([1, 2, 3], frac, 0)


def test_subsample_balanced():
    samples = [data.LabeledSample(np.full(256, 0.5), i % 2, i % 2) for i in range(20)]
    got = data.subsample_balanced(samples, {0: 3, 1: 4}, seed=1)
    assert [s.true_label for s in got].count(0) == 3 and len(got) == 7
    with pytest.raises(DomainError):
        data.subsample_balanced(samples, {0: 11}, seed=1)


# -- real files -------------------------------------------------------------


@needs_mnist
def test_official_files(mnist_dir):
    images, labels = data.load_mnist_split(mnist_dir, "train")
    assert images.shape == (60000, 28, 28)
    _, test_labels = data.load_mnist_split(mnist_dir, "test")
    assert test_labels.shape == (10000,)


@needs_mnist
def test_binary_test_split_counts(mnist_dir):
    samples = data.load_binary_task(mnist_dir, "test")
    classes = np.array([s.true_label for s in samples])
    assert (classes == 0).sum() == 1135
    assert (classes == 1).sum() == 1028
    feats = data.features_matrix(samples)
    assert feats.shape == (2163, 256) and feats.min() >= 0 and feats.max() <= 1


@needs_mnist
def test_pipeline_is_deterministic(mnist_dir):
    a = data.load_binary_task(mnist_dir, "test")[:50]
    b = data.load_binary_task(mnist_dir, "test")[:50]
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
