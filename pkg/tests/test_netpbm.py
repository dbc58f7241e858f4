from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pnphvae.netpbm import NetpbmError, decode, encode, quantize, read_image, write_image

GOLDEN = Path(__file__).parent / "data" / "gradient8.pgm"


def test_single_pixel():
    img = decode(b"P5\n1 1\n255\n\x80")
    assert img.shape == (1, 1, 1)
    assert img.as_array()[0, 0] == 128 / 255


def test_golden_gradient_file():
    img = read_image(GOLDEN)
    expected = (4.0 * np.arange(64)).reshape(8, 8) / 255
    assert np.array_equal(img.as_array(), expected)
    assert encode(img) == GOLDEN.read_bytes()


def test_comments_in_header():
    img = decode(b"P5 # made by hand\n# another\n2 1\n255\n\x00\xff")
    assert img.as_array().tolist() == [[0.0, 1.0]]


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_pgm_roundtrip_bit_exact(q):
    blob = encode(q / 255.0)
    assert np.array_equal(quantize(decode(blob).as_array()), q)
    assert encode(decode(blob)) == blob


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(1, 4), st.integers(1, 4), st.just(3))))
def test_ppm_16bit_roundtrip(q):
    blob = encode(q / 65535.0, maxval=65535)
    assert blob.startswith(b"P6")
    assert np.array_equal(quantize(decode(blob).as_array(), 65535), q)


def test_quantize_clamps_and_rounds_half_up():
    assert quantize(np.array([-0.5, 0.5 / 255, 1.5 / 255, 2.0])).tolist() == [0, 1, 2, 255]


def test_file_roundtrip(tmp_path):
    x = np.random.default_rng(0).random((5, 7, 3))
    write_image(tmp_path / "a.ppm", x)
    assert np.array_equal(read_image(tmp_path / "a.ppm").as_array(), quantize(x) / 255)


@pytest.mark.parametrize("blob,offset", [
    (b"P5\n2 2\n255\n\x00\x01\x02", 14),   # truncated payload
    (b"P5\n2 x\n255\n", 5),                # non-numeric height
    (b"P3\n1 1\n255\n0", 0),               # unsupported magic
    (b"P5\n1 1\n100\n\x00", 7),            # unsupported maxval
    (b"P5\n1 1", 6),                       # header ends early
])
def test_malformed_files_name_byte_offset(blob, offset):
    with pytest.raises(NetpbmError, match=f"at byte {offset}"):
        decode(blob)


def test_read_error_names_path(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P5\n1")
    with pytest.raises(NetpbmError, match="bad.pgm"):
        read_image(tmp_path / "bad.pgm")


def test_encode_rejects_bad_shape():
    with pytest.raises(NetpbmError):
        encode(np.zeros((2, 2, 2)))
