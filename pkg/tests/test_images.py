import numpy as np
import pytest

from mintnet.errors import ShapeError
from mintnet.images import read_pnm, tile, write_grid, write_pnm


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12, dtype=float).reshape(1, 3, 4) * 20
    p = write_pnm(tmp_path / "a.pgm", img)
    assert p.read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pnm(p), img.astype(np.uint8))


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 2))
    p = write_pnm(tmp_path / "a.ppm", img)
    assert p.read_bytes()[:2] == b"P6"
    np.testing.assert_array_equal(read_pnm(p), img)


def test_tile_layout(tmp_path):
    imgs = np.stack([np.full((1, 2, 2), k) for k in range(5)])
    g = tile(imgs, cols=3, pad=1)
    assert g.shape == (1, 7, 10)
    assert g[0, 1, 1] == 0 and g[0, 1, 4] == 1 and g[0, 4, 4] == 4 and g[0, 4, 7] == 0
    assert write_grid(tmp_path / "g", imgs).suffix == ".pgm"
    with pytest.raises(ShapeError):
        write_pnm(tmp_path / "bad", np.zeros((2, 3, 3)))
