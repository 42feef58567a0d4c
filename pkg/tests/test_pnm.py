import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boxboot import pnm


@settings(max_examples=30)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("pgm") / "a.pgm"
    pnm.write_pgm(path, data)
    assert np.array_equal(pnm.read_pnm(path), data)


@settings(max_examples=30)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("ppm") / "a.ppm"
    pnm.write_ppm(path, data)
    assert np.array_equal(pnm.read_pnm(path), data)


def test_header_layout(tmp_path):
    path = tmp_path / "a.pgm"
    pnm.write_pgm(path, np.array([[1, 2, 3], [4, 5, 6]], dtype=np.uint8))
    assert path.read_bytes() == b"P5\n3 2\n255\n\x01\x02\x03\x04\x05\x06"


def test_reads_comments_and_whitespace(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5 # made by hand\n2  1\n# maxval next\n255\n\x07\x20")
    assert pnm.read_pnm(path).tolist() == [[7, 32]]


@pytest.mark.parametrize(
    "raw",
    [b"P2\n1 1\n255\n1", b"P5\n2 2\n255\n\x00\x00\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1", b""],
)
def test_rejects_bad_files(tmp_path, raw):
    path = tmp_path / "bad.pgm"
    path.write_bytes(raw)
    with pytest.raises(pnm.PnmError):
        pnm.read_pnm(path)


def test_write_validates(tmp_path):
    with pytest.raises(ValueError):
        pnm.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        pnm.write_ppm(tmp_path / "x.ppm", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        pnm.write_pgm(tmp_path / "x.pgm", np.full((2, 2), 256))
