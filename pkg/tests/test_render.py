import numpy as np
import pytest

from hsiwin.datacube import default_palette
from hsiwin.render import colorize, ppm_bytes, side_by_side, write_ppm


def test_ppm_header_and_size(tmp_path):
    labels = np.zeros((64, 64), dtype=np.int32)
    labels[10:20, 5:9] = 3
    path = write_ppm(tmp_path / "m.ppm", labels, default_palette(4))
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n64 64\n255\n")
    assert len(raw) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3


def test_ppm_header_uses_width_then_height():
    assert ppm_bytes(np.zeros((2, 5, 3), dtype=np.uint8)).startswith(b"P6\n5 2\n255\n")


def test_colorize_palette_lookup():
    pal = ((255, 0, 0), (0, 255, 0))
    rgb = colorize(np.array([[0, 1, 2]]), pal)
    np.testing.assert_array_equal(rgb[0], [[0, 0, 0], [255, 0, 0], [0, 255, 0]])
    with pytest.raises(ValueError):
        colorize(np.array([[3]]), pal)


def test_default_palette_distinct():
    pal = default_palette(16)
    assert len(set(pal)) == 16 and all(len(c) == 3 for c in pal)


def test_side_by_side_shape():
    a = np.zeros((4, 3, 3), dtype=np.uint8)
    out = side_by_side(a, a)
    assert out.shape == (4, 8, 3)
    assert np.all(out[:, 3:5] == 255)
