"""Binary PPM (P6) rendering of class maps."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np


def colorize(labels: np.ndarray, palette: Sequence[Sequence[int]]) -> np.ndarray:
    """H x W x 3 uint8 image; class 0 is black, class c uses ``palette[c - 1]``."""
    lut = np.zeros((len(palette) + 1, 3), dtype=np.uint8)
    lut[1:] = np.asarray(palette, dtype=np.uint8).reshape(-1, 3)
    if labels.max(initial=0) > len(palette):
        raise ValueError("label value exceeds palette size")
    return lut[labels]


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_ppm(path: str | os.PathLike, labels: np.ndarray, palette) -> Path:
    path = Path(path)
    path.write_bytes(ppm_bytes(colorize(labels, palette)))
    return path


def side_by_side(left: np.ndarray, right: np.ndarray, gap: int = 2) -> np.ndarray:
    """Concatenate two RGB images horizontally with a white gutter."""
    h = max(left.shape[0], right.shape[0])
    canvas = np.full((h, left.shape[1] + gap + right.shape[1], 3), 255, dtype=np.uint8)
    canvas[: left.shape[0], : left.shape[1]] = left
    canvas[: right.shape[0], left.shape[1] + gap :] = right
    return canvas
