import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graybox import netpbm


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.float64) / 255.0
    netpbm.write_ppm(tmp_path / "x.ppm", img)
    back = netpbm.read_ppm(tmp_path / "x.ppm")
    assert np.array_equal(back, img)


def test_ppm_bytes_are_deterministic(tmp_path):
    img = np.zeros((4, 4, 3))
    img[1, 2] = (1.0, 0.4, 0.7)
    netpbm.write_ppm(tmp_path / "a.ppm", img)
    netpbm.write_ppm(tmp_path / "b.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_ppm_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        netpbm.write_ppm(tmp_path / "x.ppm", np.zeros((4, 4)))


def test_pgm16_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    vals = rng.integers(0, 65536, size=(6, 3)).astype(np.uint16)
    netpbm.write_pgm16(tmp_path / "x.pgm", vals)
    assert np.array_equal(netpbm.read_pgm16(tmp_path / "x.pgm"), vals)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_pbm_roundtrip_any_width(h, w, seed):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
    import tempfile, pathlib

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "m.pbm"
        netpbm.write_pbm(path, mask)
        assert np.array_equal(netpbm.read_pbm(path), mask)


def test_wrong_magic_rejected(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ValueError, match="not a P6"):
        netpbm.read_ppm(tmp_path / "x.ppm")
