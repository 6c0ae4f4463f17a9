"""Leakage-free balanced window sampling and the audits that check it.

The scene is mirror-padded on the bottom/right so it tiles exactly into
disjoint ``w x w`` windows. Classes are visited in ascending id order; for
each class the still-unassigned windows that contain it are split at random
into train/test and then removed from consideration, so every window belongs
to at most one set.

Randomness comes from numpy's PCG64 bit generator (``np.random.PCG64``)
seeded with the partition seed, which keeps partitions reproducible across
platforms and numpy versions that ship PCG64.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datacube import HyperCube, LabelMap

__all__ = [
    "UNASSIGNED",
    "TRAIN",
    "TEST",
    "SamplingError",
    "WindowPartition",
    "AuditReport",
    "PixelSplit",
    "mirror_pad",
    "mirror_pad_array",
    "resolve_rates",
    "leakage_free_sample",
    "extract_windows",
    "window_pixel_masks",
    "audit_partition",
    "baseline_pixel_sample",
    "patch_overlap_audit",
    "patch_overlap_bruteforce",
    "subsample_train",
]

UNASSIGNED, TRAIN, TEST = 0, 1, 2
_TAG_NAMES = {UNASSIGNED: "unassigned", TRAIN: "train", TEST: "test"}
_TAG_CODES = {v: k for k, v in _TAG_NAMES.items()}


class SamplingError(ValueError):
    """A class cannot be placed in both sets with the requested window size."""


def _padded_len(n: int, w: int) -> int:
    return -(-n // w) * w


def mirror_pad_array(a: np.ndarray, w: int) -> np.ndarray:
    """Reflect the bottom rows and right columns of ``a`` (inclusive of the edge).

    Row ``H + k`` copies row ``H - 1 - k``; columns likewise.
    """
    if w <= 0:
        raise ValueError(f"window size must be positive, got {w}")
    h, wd = a.shape[:2]
    ph, pw = _padded_len(h, w) - h, _padded_len(wd, w) - wd
    if ph == 0 and pw == 0:
        return a
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    return np.pad(a, pad, mode="symmetric")


def mirror_pad(cube: HyperCube, labels: LabelMap, w: int) -> tuple[HyperCube, LabelMap]:
    if w <= 0:
        raise ValueError(f"window size must be positive, got {w}")
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ValueError(
            f"cube is {cube.height}x{cube.width} but labels are {labels.height}x{labels.width}"
        )
    data = mirror_pad_array(cube.data, w)
    lab = mirror_pad_array(labels.labels, w)
    return (
        HyperCube(np.ascontiguousarray(data), cube.band_mask, cube.normalized, cube.wavelengths),
        LabelMap(np.ascontiguousarray(lab), labels.num_classes, labels.class_names, labels.palette),
    )


@dataclass(eq=False)
class WindowPartition:
    """Window grid geometry plus one tag (and owning class) per window."""

    window: int
    dims: tuple[int, int]
    tags: np.ndarray  # (rows, cols) int8 in {UNASSIGNED, TRAIN, TEST}
    owners: np.ndarray  # (rows, cols) int32, 0 for unassigned windows
    seed: int | None
    rates: tuple[float, ...]

    @property
    def padded_dims(self) -> tuple[int, int]:
        return (self.tags.shape[0] * self.window, self.tags.shape[1] * self.window)

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.tags.shape

    @property
    def num_windows(self) -> int:
        return self.tags.size

    def windows(self, which: int) -> list[tuple[int, int]]:
        """Grid coordinates of the windows tagged ``which``, row-major."""
        rr, cc = np.nonzero(self.tags == which)
        return list(zip(rr.tolist(), cc.tolist()))

    def pixel_tags(self) -> np.ndarray:
        """Window tag broadcast to every pixel of the padded grid."""
        w = self.window
        return np.kron(self.tags, np.ones((w, w), dtype=self.tags.dtype))

    def to_json(self) -> dict:
        rows, cols = self.grid_dims
        entries = [
            [r, c, _TAG_NAMES[int(self.tags[r, c])], int(self.owners[r, c])]
            for r in range(rows)
            for c in range(cols)
        ]
        return {
            "w": self.window,
            "seed": self.seed,
            "rates": list(self.rates),
            "dims": list(self.dims),
            "padded_dims": list(self.padded_dims),
            "grid_dims": [rows, cols],
            "assignments": entries,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "WindowPartition":
        rows, cols = (int(v) for v in obj["grid_dims"])
        w = int(obj["w"])
        tags = np.zeros((rows, cols), dtype=np.int8)
        owners = np.zeros((rows, cols), dtype=np.int32)
        for r, c, tag, cls_id in obj["assignments"]:
            tags[r, c] = _TAG_CODES[tag]
            owners[r, c] = cls_id
        padded = tuple(int(v) for v in obj["padded_dims"])
        if padded != (rows * w, cols * w):
            raise ValueError("padded_dims inconsistent with grid_dims and w")
        dims = tuple(int(v) for v in obj.get("dims", padded))
        return cls(w, dims, tags, owners, obj.get("seed"), tuple(float(x) for x in obj["rates"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "WindowPartition":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def resolve_rates(rates: float | Sequence[float], num_classes: int) -> tuple[float, ...]:
    if np.isscalar(rates):
        rates = [float(rates)] * num_classes
    rates = tuple(float(r) for r in rates)
    if len(rates) != num_classes:
        raise ValueError(f"expected {num_classes} per-class rates, got {len(rates)}")
    bad = [r for r in rates if not 0.0 < r < 1.0]
    if bad:
        raise ValueError(f"rates must lie in (0, 1), got {bad}")
    return rates


def _window_class_presence(padded_labels: np.ndarray, w: int, k: int) -> np.ndarray:
    """Boolean (rows, cols, K+1) table: does window (r, c) contain class j?"""
    hp, wp = padded_labels.shape
    blocks = padded_labels.reshape(hp // w, w, wp // w, w).transpose(0, 2, 1, 3)
    onehot = np.zeros(blocks.shape[:2] + (k + 1,), dtype=bool)
    flat = blocks.reshape(blocks.shape[0], blocks.shape[1], -1)
    for j in range(1, k + 1):
        onehot[..., j] = (flat == j).any(axis=-1)
    return onehot


def leakage_free_sample(
    cube: HyperCube | None,
    labels: LabelMap,
    w: int,
    rates: float | Sequence[float],
    seed: int,
) -> WindowPartition:
    """Split the mirror-padded scene into disjoint train/test windows, class by class.

    For class ``c`` the ``n`` still-available windows containing it are
    shuffled and ``clip(floor(rate_c * n), 1, n - 1)`` become training
    windows. Raises :class:`SamplingError` when fewer than two windows are
    available for some class.
    """
    if w <= 0:
        raise ValueError(f"window size must be positive, got {w}")
    if cube is not None and (cube.height, cube.width) != (labels.height, labels.width):
        raise ValueError("cube and labels dimensions differ")
    k = labels.num_classes
    rates = resolve_rates(rates, k)
    lab = mirror_pad_array(labels.labels, w)
    presence = _window_class_presence(lab, w, k)
    rows, cols = presence.shape[:2]

    tags = np.zeros((rows, cols), dtype=np.int8)
    owners = np.zeros((rows, cols), dtype=np.int32)
    available = np.ones((rows, cols), dtype=bool)
    rng = np.random.Generator(np.random.PCG64(seed))

    for c in range(1, k + 1):
        cand = np.flatnonzero((presence[..., c] & available).ravel())
        n = cand.size
        if n < 2:
            raise SamplingError(
                f"class {c} ({labels.class_names[c - 1]}) occurs in {n} available window(s) "
                f"at window size {w}; at least 2 are needed, try a smaller window size"
            )
        n_train = min(max(int(np.floor(rates[c - 1] * n)), 1), n - 1)
        chosen = rng.permutation(n)[:n_train]
        is_train = np.zeros(n, dtype=bool)
        is_train[chosen] = True
        rr, cc = np.divmod(cand, cols)
        tags[rr, cc] = np.where(is_train, TRAIN, TEST)
        owners[rr, cc] = c
        available[rr, cc] = False

    return WindowPartition(w, (labels.height, labels.width), tags, owners, seed, rates)


def subsample_train(partition: WindowPartition, fraction: float, seed: int) -> WindowPartition:
    """Keep a seeded random ``fraction`` of each class's training windows (at least one).

    Dropped windows become unassigned; the test set is untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    tags = partition.tags.copy()
    if fraction < 1.0:
        rng = np.random.Generator(np.random.PCG64(seed))
        for c in np.unique(partition.owners[partition.tags == TRAIN]):
            idx = np.flatnonzero(((partition.tags == TRAIN) & (partition.owners == c)).ravel())
            keep = max(1, int(np.ceil(fraction * idx.size)))
            drop = rng.permutation(idx)[keep:]
            tags.ravel()[drop] = UNASSIGNED
    owners = np.where(tags == UNASSIGNED, 0, partition.owners).astype(np.int32)
    return WindowPartition(partition.window, partition.dims, tags, owners, partition.seed, partition.rates)


def _check_dims(partition: WindowPartition, h: int, w: int) -> None:
    if (h, w) not in (partition.dims, partition.padded_dims):
        raise ValueError(
            f"scene is {h}x{w}; partition was built for {partition.dims} "
            f"(padded {partition.padded_dims})"
        )


def extract_windows(
    cube: HyperCube, labels: LabelMap, partition: WindowPartition, which: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut the windows tagged ``which`` out of the padded scene.

    Returns ``(cube_window (w, w, B), label_window (w, w))`` pairs in row-major
    grid order. Every labelled pixel in a window is kept, whatever its class.
    """
    _check_dims(partition, cube.height, cube.width)
    _check_dims(partition, labels.height, labels.width)
    w = partition.window
    data = mirror_pad_array(cube.data, w)
    lab = mirror_pad_array(labels.labels, w)
    out = []
    for r, c in partition.windows(which):
        sl = (slice(r * w, (r + 1) * w), slice(c * w, (c + 1) * w))
        out.append((data[sl].copy(), lab[sl].copy()))
    return out


def window_pixel_masks(partition: WindowPartition, labels: LabelMap) -> dict[str, np.ndarray]:
    """Boolean masks over the padded grid: labelled pixels in train / test / unassigned windows."""
    _check_dims(partition, labels.height, labels.width)
    lab = mirror_pad_array(labels.labels, partition.window)
    ptags = partition.pixel_tags()
    labelled = lab > 0
    return {
        "train": labelled & (ptags == TRAIN),
        "test": labelled & (ptags == TEST),
        "unassigned": labelled & (ptags == UNASSIGNED),
    }


@dataclass
class AuditReport:
    train_pixels: dict[int, int]
    test_pixels: dict[int, int]
    train_windows: dict[int, int]
    test_windows: dict[int, int]
    leakage_pixel_count: int
    uncovered_labelled_pixel_count: int
    p1_balanced: bool
    p2_utilised: bool
    p3_disjoint: bool
    p4_seeded: bool
    flags: dict = field(init=False)

    def __post_init__(self):
        self.flags = {
            "P1": self.p1_balanced,
            "P2": self.p2_utilised,
            "P3": self.p3_disjoint,
            "P4-seeded": self.p4_seeded,
        }

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_json(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}

        return {
            "train_pixels": keyed(self.train_pixels),
            "test_pixels": keyed(self.test_pixels),
            "train_windows": keyed(self.train_windows),
            "test_windows": keyed(self.test_windows),
            "leakage_pixel_count": self.leakage_pixel_count,
            "uncovered_labelled_pixel_count": self.uncovered_labelled_pixel_count,
            "flags": dict(self.flags),
            "passed": self.passed,
        }


def audit_partition(partition: WindowPartition, labels: LabelMap) -> AuditReport:
    """Count what each set actually contains and check the four sampling principles."""
    k = labels.num_classes
    w = partition.window
    lab = mirror_pad_array(labels.labels, w)
    masks = window_pixel_masks(partition, labels)

    # coordinate sets rather than masks so the intersection is an honest count
    def coords(mask):
        rr, cc = np.nonzero(mask)
        return set(zip(rr.tolist(), cc.tolist()))

    leakage = len(coords(masks["train"]) & coords(masks["test"]))
    uncovered = int(masks["unassigned"].sum())

    presence = _window_class_presence(lab, w, k)
    train_w = {c: int((presence[..., c] & (partition.tags == TRAIN)).sum()) for c in range(1, k + 1)}
    test_w = {c: int((presence[..., c] & (partition.tags == TEST)).sum()) for c in range(1, k + 1)}
    train_px = {c: int((masks["train"] & (lab == c)).sum()) for c in range(1, k + 1)}
    test_px = {c: int((masks["test"] & (lab == c)).sum()) for c in range(1, k + 1)}

    return AuditReport(
        train_pixels=train_px,
        test_pixels=test_px,
        train_windows=train_w,
        test_windows=test_w,
        leakage_pixel_count=leakage,
        uncovered_labelled_pixel_count=uncovered,
        p1_balanced=all(train_w[c] >= 1 and test_w[c] >= 1 for c in range(1, k + 1)),
        p2_utilised=uncovered == 0,
        p3_disjoint=leakage == 0,
        p4_seeded=partition.seed is not None,
    )


# ---------------------------------------------------------------------------
# pixel-random baseline


@dataclass(eq=False)
class PixelSplit:
    shape: tuple[int, int]
    train: np.ndarray  # (n, 2) row/col coordinates
    test: np.ndarray

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        tr = np.zeros(self.shape, dtype=bool)
        te = np.zeros(self.shape, dtype=bool)
        tr[self.train[:, 0], self.train[:, 1]] = True
        te[self.test[:, 0], self.test[:, 1]] = True
        return tr, te


def baseline_pixel_sample(labels: LabelMap, rate: float, seed: int) -> PixelSplit:
    """Stratified pixel-random split, the usual (leaky) protocol."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must lie in (0, 1), got {rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    flat = labels.labels.ravel()
    train_idx, test_idx = [], []
    for c in range(1, labels.num_classes + 1):
        idx = np.flatnonzero(flat == c)
        if idx.size < 2:
            raise SamplingError(f"class {c} has {idx.size} pixel(s); at least 2 are needed")
        n_train = min(max(int(np.floor(rate * idx.size)), 1), idx.size - 1)
        perm = rng.permutation(idx)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    w = labels.width
    return PixelSplit(
        (labels.height, labels.width),
        np.stack(np.divmod(tr, w), axis=1),
        np.stack(np.divmod(te, w), axis=1),
    )


def _dilate_square(mask: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``radius`` of any True pixel (summed-area table)."""
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    total = sat[r1][:, c1] - sat[r0][:, c1] - sat[r1][:, c0] + sat[r0][:, c0]
    return total > 0


def patch_overlap_audit(split: PixelSplit, radius: int) -> dict:
    """Count test pixels whose (2r+1)^2 patch meets some training pixel's patch.

    Two patches of radius ``r`` intersect iff the centres are within
    Chebyshev distance ``2r``.
    """
    if radius < 0:
        raise ValueError("patch radius must be >= 0")
    tr, te = split.masks()
    near = _dilate_square(tr, 2 * radius)
    n_overlap = int((near & te).sum())
    n_test = int(te.sum())
    return {
        "radius": radius,
        "overlapping_test_pixel_count": n_overlap,
        "test_pixel_count": n_test,
        "fraction": n_overlap / n_test if n_test else 0.0,
    }


def patch_overlap_bruteforce(split: PixelSplit, radius: int) -> int:
    """O(n_test * n_train) reference for :func:`patch_overlap_audit`."""
    from .kernels import chebyshev_overlap_count

    return chebyshev_overlap_count(split.test, split.train, 2 * radius)
