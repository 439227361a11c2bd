import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from astrocnn.formats import (
    FormatError,
    decode_imf1,
    encode_imf1,
    encode_pgm,
    read_image,
    write_image,
)


def test_imf1_roundtrip_bit_exact(tmp_path):
    img = np.random.default_rng(3).standard_normal((7, 5)).astype(np.float32)
    path = tmp_path / "a.imf1"
    write_image(img, path)
    back = read_image(path)
    assert back.dtype == np.float32
    assert back.tobytes() == img.tobytes()


def test_imf1_header_layout():
    blob = encode_imf1(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob.startswith(b"IMF1 1 2\n")
    assert blob[9:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_imf1_truncated(tmp_path):
    path = tmp_path / "t.imf1"
    path.write_bytes(b"IMF1 4 4\n" + np.zeros(15, "<f4").tobytes())
    with pytest.raises(FormatError, match="truncated"):
        read_image(path)


def test_imf1_malformed_header():
    with pytest.raises(FormatError, match="malformed"):
        decode_imf1(b"IMF1 four 4\n")


def test_unsupported_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(FormatError, match="unsupported magic"):
        read_image(path)


def test_pgm16_roundtrip_within_quantization(tmp_path):
    img = np.array([[0.0, 1 / 3], [2 / 3, 1.0]], dtype=np.float32)
    path = tmp_path / "q.pgm"
    write_image(img, path)
    back = read_image(path)
    assert np.max(np.abs(back - img)) <= 1 / 65535


def test_pgm8_roundtrip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((9, 4)).astype(np.float32)
    path = tmp_path / "q8.pgm"
    write_image(img, path, bits=8)
    assert read_image(path).shape == (9, 4)
    assert np.max(np.abs(read_image(path) - img)) <= 0.5 / 255 + 1e-7


def test_pgm_clamps_out_of_range(tmp_path):
    path = tmp_path / "c.pgm"
    write_image(np.array([[-0.5, 1.5]]), path)
    np.testing.assert_array_equal(read_image(path), [[0.0, 1.0]])


def test_pgm_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_image(path), [[0.0, 1.0]])


def test_pgm_truncated(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(encode_pgm(np.zeros((4, 4)))[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_image(path)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_imf1_roundtrip_property(img):
    back, end = decode_imf1(encode_imf1(img))
    assert back.tobytes() == img.tobytes()
