import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motfield.grid import (Grid, GridError, as_array, read_pfm, read_pgm,
                           read_ppm, write_pfm, write_pgm, write_ppm)


def test_grid_properties(rng):
    g = Grid(rng.uniform(size=(4, 5, 3)))
    assert (g.height, g.width, g.channels) == (4, 5, 3)
    assert g.shape == (4, 5, 3)


def test_grid_promotes_2d():
    g = Grid(np.zeros((3, 4)))
    assert g.shape == (3, 4, 1)


def test_grid_is_immutable(rng):
    g = Grid(rng.uniform(size=(3, 3, 1)))
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1.0


def test_grid_rejects_nonfinite():
    with pytest.raises(GridError):
        Grid(np.array([[np.nan]]))
    with pytest.raises(GridError):
        Grid(np.array([[np.inf]]))


def test_as_array_channel_check():
    with pytest.raises(GridError):
        as_array(np.zeros((3, 3, 2)), channels=3)
    with pytest.raises(GridError):
        as_array(np.zeros(5))


@given(h=st.integers(1, 8), w=st.integers(1, 8), c=st.sampled_from([1, 3]),
       seed=st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_pfm_roundtrip_exact_float32(tmp_path_factory, h, w, c, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((h, w, c)).astype(np.float32).astype(np.float64)
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(path, a)
    back = read_pfm(path)
    np.testing.assert_array_equal(back.data, a)


def test_pfm_rejects_bad_channels(tmp_path):
    with pytest.raises(GridError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_pfm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"not a pfm at all")
    with pytest.raises(GridError):
        read_pfm(p)


def test_pfm_truncated(tmp_path):
    p = tmp_path / "t.pfm"
    write_pfm(p, np.zeros((4, 4, 1)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(GridError):
        read_pfm(p)


def test_ppm_roundtrip_quantized(tmp_path, rng):
    a = rng.uniform(size=(5, 7, 3))
    path = tmp_path / "x.ppm"
    write_ppm(path, a)
    back = read_ppm(path)
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back.data - a)) <= 0.5 / 255.0 + 1e-12


def test_pgm_roundtrip_binary_mask(tmp_path, rng):
    m = (rng.uniform(size=(6, 4)) > 0.5).astype(np.float64)
    path = tmp_path / "m.pgm"
    write_pgm(path, m)
    back = read_pgm(path)
    np.testing.assert_array_equal(back.data[..., 0], m)


def test_u8_export_clips(tmp_path):
    write_ppm(tmp_path / "c.ppm", np.full((2, 2, 3), 2.0))
    back = read_ppm(tmp_path / "c.ppm")
    assert back.data.max() == 1.0
