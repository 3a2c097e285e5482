import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdregs.data import IDX_UBYTE_3D, DatasetHandle, IdxError, load_idx, save_idx, synthetic_strokes


def _write(path, magic, dims, payload: bytes):
    path.write_bytes(struct.pack(">IIII", magic, *dims) + payload)


def test_two_image_file_normalized(tmp_path):
    f = tmp_path / "two.idx"
    _write(f, IDX_UBYTE_3D, (2, 2, 2), bytes([0, 255, 51, 102, 255, 0, 0, 0]))
    h = load_idx(f)
    assert h.images.shape == (2, 4)
    np.testing.assert_array_equal(h.images[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(h.images[1], [1.0, 0.0, 0.0, 0.0])


def test_row_major_flattening_and_halves(tmp_path):
    f = tmp_path / "grid.idx"
    _write(f, IDX_UBYTE_3D, (1, 4, 3), bytes(range(12)))
    h = load_idx(f)
    np.testing.assert_array_equal(h.images[0] * 255, np.arange(12))
    assert h.split == 6
    np.testing.assert_array_equal(h.top()[0] * 255, np.arange(6))
    np.testing.assert_array_equal(h.bottom()[0] * 255, np.arange(6, 12))


def test_truncated_payload_names_byte_counts(tmp_path):
    f = tmp_path / "short.idx"
    _write(f, IDX_UBYTE_3D, (2, 2, 2), bytes(5))
    with pytest.raises(IdxError, match="expected 8 bytes, got 5"):
        load_idx(f)


def test_short_header(tmp_path):
    f = tmp_path / "hdr.idx"
    f.write_bytes(b"\x00\x00\x08")
    with pytest.raises(IdxError, match="header"):
        load_idx(f)


def test_bad_magic(tmp_path):
    f = tmp_path / "labels.idx"
    _write(f, 0x00000801, (1, 1, 1), bytes(1))
    with pytest.raises(IdxError, match="0x00000801"):
        load_idx(f)


def test_dimension_overflow(tmp_path):
    f = tmp_path / "huge.idx"
    _write(f, IDX_UBYTE_3D, (2 ** 32 - 1, 2 ** 16, 2 ** 16), b"")
    with pytest.raises(IdxError, match="overflow"):
        load_idx(f)


def test_trailing_bytes_rejected(tmp_path):
    f = tmp_path / "long.idx"
    _write(f, IDX_UBYTE_3D, (1, 1, 2), bytes(3))
    with pytest.raises(IdxError, match="trailing"):
        load_idx(f)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 5), st.integers(1, 4), st.integers(1, 4))))
def test_round_trip_is_identity(tmp_path_factory, pixels):
    n, rows, cols = pixels.shape
    f = tmp_path_factory.mktemp("rt") / "x.idx"
    save_idx(f, pixels, rows, cols)
    h = load_idx(f)
    assert (h.rows, h.cols) == (rows, cols)
    np.testing.assert_array_equal(np.rint(h.images * 255).astype(np.uint8), pixels.reshape(n, rows * cols))
    save_idx(f, h.images, rows, cols)
    np.testing.assert_array_equal(load_idx(f).images, h.images)


def test_handle_rejects_out_of_range():
    with pytest.raises(ValueError, match="intensities"):
        DatasetHandle(np.full((1, 4), 1.5), 2, 2)
    with pytest.raises(ValueError):
        DatasetHandle(np.zeros((1, 5)), 2, 2)


def test_synthetic_strokes_shape_and_range():
    h = synthetic_strokes(20, np.random.default_rng(0))
    assert h.images.shape == (20, 784)
    assert h.images.min() >= 0 and h.images.max() <= 1
    # strokes cross the middle row, so both halves carry ink
    assert np.all(h.top().max(axis=1) > 0.5) and np.all(h.bottom().max(axis=1) > 0.5)
    # soft edges give intermediate intensities for dynamic binarization
    assert np.any((h.images > 0.1) & (h.images < 0.9))


def test_synthetic_strokes_deterministic():
    a = synthetic_strokes(5, np.random.default_rng(7)).images
    b = synthetic_strokes(5, np.random.default_rng(7)).images
    np.testing.assert_array_equal(a, b)
