"""Seeded augmentation of training windows.

A window is a pair ``(cube (w, w, B), labels (w, w))``. Geometric ops move
cube and label pixels together; photometric ops touch the cube only and
clamp to the normalised range [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentPolicy",
    "rotate_window",
    "flip_window",
    "add_noise",
    "adjust_brightness",
    "augment_set",
]

Window = tuple[np.ndarray, np.ndarray]

MAX_COPIES = 16


@dataclass(frozen=True)
class AugmentPolicy:
    rotation: str = "quarter"  # "quarter" | "arbitrary"
    flip: bool = True
    noise_sigma: float = 0.02
    brightness_delta: float = 0.1
    copies: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.rotation not in ("quarter", "arbitrary"):
            raise ValueError(f"rotation must be 'quarter' or 'arbitrary', got {self.rotation!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.brightness_delta < 1:
            raise ValueError("brightness_delta must lie in [0, 1)")
        if not 0 <= self.copies <= MAX_COPIES:
            raise ValueError(f"copies must lie in [0, {MAX_COPIES}]")


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric reflection: -1 -> 0, n -> n-1
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def rotate_window(win: Window, angle: float, mode: str = "quarter") -> Window:
    """Rotate clockwise by ``angle`` degrees about the window centre.

    ``quarter`` mode requires a multiple of 90 and permutes pixels exactly.
    ``arbitrary`` mode resamples with nearest neighbour and reflect fill.
    """
    cube, lab = win
    n = lab.shape[0]
    if lab.shape != (n, n) or cube.shape[:2] != (n, n):
        raise ValueError(f"rotation needs a square window, got {lab.shape}")
    if mode == "quarter":
        q, rem = divmod(float(angle), 90.0)
        if rem != 0:
            raise ValueError(f"quarter mode needs a multiple of 90 degrees, got {angle}")
        k = -int(q) % 4
        return np.rot90(cube, k, axes=(0, 1)).copy(), np.rot90(lab, k).copy()
    if mode != "arbitrary":
        raise ValueError(f"unknown rotation mode {mode!r}")
    theta = np.deg2rad(angle)
    c = (n - 1) / 2.0
    ii, jj = np.mgrid[0:n, 0:n].astype(np.float64)
    di, dj = ii - c, jj - c
    cos, sin = np.cos(theta), np.sin(theta)
    src_i = np.rint(c + cos * di - sin * dj).astype(np.int64)
    src_j = np.rint(c + sin * di + cos * dj).astype(np.int64)
    src_i, src_j = _reflect(src_i, n), _reflect(src_j, n)
    return cube[src_i, src_j].copy(), lab[src_i, src_j].copy()


def flip_window(win: Window, axis: str) -> Window:
    """``horizontal`` mirrors left-right, ``vertical`` mirrors top-bottom."""
    cube, lab = win
    if axis == "horizontal":
        return cube[:, ::-1].copy(), lab[:, ::-1].copy()
    if axis == "vertical":
        return cube[::-1].copy(), lab[::-1].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def add_noise(cube: np.ndarray, sigma: float, seed: int | np.random.Generator) -> np.ndarray:
    """Add N(0, (2 sigma)^2) noise (sigma is a fraction of the [-1, 1] range) and clamp."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return cube.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    noisy = cube + rng.normal(0.0, 2.0 * sigma, size=cube.shape).astype(cube.dtype)
    return np.clip(noisy, -1.0, 1.0)


def adjust_brightness(cube: np.ndarray, factor: float) -> np.ndarray:
    if factor <= 0:
        raise ValueError(f"brightness factor must be positive, got {factor}")
    return np.clip(cube * cube.dtype.type(factor), -1.0, 1.0)


def _variant(win: Window, policy: AugmentPolicy, window_index: int, copy_index: int) -> Window:
    # one substream per (window, copy): order of evaluation cannot change the result
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([policy.seed, window_index, copy_index])))
    if policy.rotation == "quarter":
        out = rotate_window(win, 90.0 * int(rng.integers(4)), "quarter")
    else:
        out = rotate_window(win, float(rng.uniform(0.0, 360.0)), "arbitrary")
    if policy.flip:
        choice = int(rng.integers(3))
        if choice == 1:
            out = flip_window(out, "horizontal")
        elif choice == 2:
            out = flip_window(out, "vertical")
    photometric = []
    if policy.noise_sigma > 0:
        photometric.append("noise")
    if policy.brightness_delta > 0:
        photometric.append("brightness")
    cube, lab = out
    if photometric:
        pick = photometric[int(rng.integers(len(photometric)))]
        if pick == "noise":
            cube = add_noise(cube, policy.noise_sigma, rng)
        else:
            d = policy.brightness_delta
            cube = adjust_brightness(cube, float(rng.uniform(1.0 - d, 1.0 + d)))
    return cube, lab


def augment_set(windows: list[Window], policy: AugmentPolicy) -> list[Window]:
    """Originals first, then ``policy.copies`` variants per window, grouped by source.

    Each variant draws a rotation, an optional flip and one photometric change
    (noise or brightness) from its own seeded substream.
    """
    out = list(windows)
    for i, win in enumerate(windows):
        for j in range(policy.copies):
            out.append(_variant(win, policy, i, j))
    return out
