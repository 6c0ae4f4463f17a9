"""Hyperspectral cubes and label maps: on-disk formats, validation, preprocessing.

On-disk layout
--------------
Cube: ``<name>.hdr.json`` plus a raw payload (``<name>.bin``) holding
little-endian float32 values in band-sequential order (band, row, col).

Labels: ``<name>.gt.bin`` holding a little-endian uint16 grid in row-major
order, with a ``<name>.gt.json`` sidecar giving ``num_classes``,
``class_names`` and ``palette``. Class 0 is always "unlabeled".
"""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "HyperCube",
    "LabelMap",
    "SynthSpec",
    "load_cube",
    "save_cube",
    "load_labels",
    "save_labels",
    "drop_bands",
    "normalize",
    "synth_dataset",
    "class_means",
    "nearest_mean_predict",
    "default_palette",
]

HEADER_SUFFIX = ".hdr.json"
LABEL_BIN_SUFFIX = ".gt.bin"
LABEL_JSON_SUFFIX = ".gt.json"


class DataFormatError(ValueError):
    """Raised when a cube or label file violates its documented format."""


@dataclass(frozen=True, eq=False)
class HyperCube:
    """An H x W x B grid of finite float32 values.

    ``band_mask`` lists the original band index of every retained band
    (all of them, in order, when omitted).
    """

    data: np.ndarray
    band_mask: tuple[int, ...] | None = None
    normalized: bool = False
    wavelengths: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataFormatError(f"cube data must be 3-D, got shape {self.data.shape}")
        if self.band_mask is None:
            object.__setattr__(self, "band_mask", tuple(range(self.data.shape[2])))
        if len(self.band_mask) != self.data.shape[2]:
            raise DataFormatError("band_mask length does not match band count")
        if any(b >= a for a, b in zip(self.band_mask[1:], self.band_mask)):
            raise DataFormatError("band_mask must be strictly increasing")
        if self.wavelengths is not None and len(self.wavelengths) != self.data.shape[2]:
            raise DataFormatError("wavelengths length does not match band count")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids, 0 = unlabeled, 1..K labelled."""

    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] = ()
    palette: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DataFormatError("label grid must be 2-D")
        if self.num_classes < 1:
            raise DataFormatError("num_classes must be >= 1")
        if not self.class_names:
            object.__setattr__(
                self, "class_names", tuple(f"class_{i}" for i in range(1, self.num_classes + 1))
            )
        if not self.palette:
            object.__setattr__(self, "palette", default_palette(self.num_classes))
        if len(self.class_names) != self.num_classes or len(self.palette) != self.num_classes:
            raise DataFormatError("class_names and palette must have num_classes entries")
        top = int(self.labels.max()) if self.labels.size else 0
        if top > self.num_classes:
            raise DataFormatError(
                f"label value {top} exceeds num_classes={self.num_classes}"
            )
        counts = self.class_counts()
        missing = [c for c in range(1, self.num_classes + 1) if counts.get(c, 0) == 0]
        if missing:
            raise DataFormatError(f"classes with zero pixels: {missing}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_counts(self) -> dict[int, int]:
        """Pixel count per labelled class (class 0 excluded)."""
        counts = np.bincount(self.labels.ravel(), minlength=self.num_classes + 1)
        return {c: int(counts[c]) for c in range(1, len(counts))}


def default_palette(k: int) -> tuple[tuple[int, int, int], ...]:
    """``k`` well-spread RGB colours (golden-angle hue walk)."""
    out = []
    for i in range(k):
        h = (i * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.75, 0.95)
        out.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return tuple(out)


# ---------------------------------------------------------------------------
# file formats


def _header_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.name.endswith(HEADER_SUFFIX):
        return p
    return p.with_name(p.name + HEADER_SUFFIX)


def _label_prefix(path: str | os.PathLike) -> Path:
    p = Path(path)
    for suffix in (LABEL_JSON_SUFFIX, LABEL_BIN_SUFFIX):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def load_cube(header_path: str | os.PathLike) -> HyperCube:
    """Read a cube from its JSON header and band-sequential float32 payload.

    ``header_path`` may be the ``.hdr.json`` file itself or the bare prefix.
    """
    hdr_path = _header_path(header_path)
    if not hdr_path.is_file():
        raise FileNotFoundError(f"cube header not found: {hdr_path}")
    with open(hdr_path) as fh:
        try:
            hdr = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{hdr_path}: invalid JSON ({exc})") from None

    try:
        h, w, b = int(hdr["height"]), int(hdr["width"]), int(hdr["bands"])
    except (KeyError, TypeError, ValueError):
        raise DataFormatError(f"{hdr_path}: height/width/bands missing or invalid") from None
    if min(h, w, b) <= 0:
        raise DataFormatError(f"{hdr_path}: dims must be positive, got {(h, w, b)}")
    if hdr.get("dtype", "f32le") != "f32le":
        raise DataFormatError(f"{hdr_path}: unsupported dtype {hdr.get('dtype')!r}")
    if hdr.get("interleave", "bsq") != "bsq":
        raise DataFormatError(f"{hdr_path}: unsupported interleave {hdr.get('interleave')!r}")

    payload_name = hdr.get("payload") or hdr_path.name[: -len(HEADER_SUFFIX)] + ".bin"
    payload = hdr_path.parent / payload_name
    if not payload.is_file():
        raise FileNotFoundError(f"cube payload not found: {payload}")
    expected = h * w * b * 4
    actual = payload.stat().st_size
    if actual != expected:
        raise DataFormatError(
            f"{payload}: payload length mismatch, expected {expected} bytes for "
            f"{h}x{w}x{b}, found {actual}"
        )

    raw = np.fromfile(payload, dtype="<f4").reshape(b, h, w)
    data = np.ascontiguousarray(raw.transpose(1, 2, 0), dtype=np.float32)
    bad = ~np.isfinite(data)
    if bad.any():
        r, c, k = (int(v) for v in np.argwhere(bad)[0])
        raise DataFormatError(f"{payload}: non-finite value at (row={r}, col={c}, band={k})")

    band_mask = tuple(int(i) for i in hdr.get("band_mask", range(b)))
    wl = hdr.get("wavelengths")
    return HyperCube(
        data=data,
        band_mask=band_mask,
        normalized=False,
        wavelengths=tuple(float(x) for x in wl) if wl is not None else None,
    )


def save_cube(cube: HyperCube, prefix: str | os.PathLike) -> Path:
    """Write ``cube`` as ``<prefix>.hdr.json`` + ``<prefix>.bin``; returns the header path."""
    prefix = Path(prefix)
    hdr_path = _header_path(prefix)
    name = hdr_path.name[: -len(HEADER_SUFFIX)]
    payload = hdr_path.parent / f"{name}.bin"
    hdr = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32le",
        "interleave": "bsq",
        "payload": payload.name,
        "band_mask": list(cube.band_mask),
    }
    if cube.wavelengths is not None:
        hdr["wavelengths"] = list(cube.wavelengths)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    bsq = np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4")
    payload.write_bytes(bsq.tobytes())
    hdr_path.write_text(json.dumps(hdr, indent=2) + "\n")
    return hdr_path


def load_labels(path: str | os.PathLike) -> LabelMap:
    """Read a ``.gt.bin`` grid and its ``.gt.json`` sidecar.

    ``path`` may name either file or the bare prefix.
    """
    prefix = _label_prefix(path)
    meta_path = prefix.with_name(prefix.name + LABEL_JSON_SUFFIX)
    grid_path = prefix.with_name(prefix.name + LABEL_BIN_SUFFIX)
    for p in (meta_path, grid_path):
        if not p.is_file():
            raise FileNotFoundError(f"label file not found: {p}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{meta_path}: invalid JSON ({exc})") from None
    try:
        h, w = int(meta["height"]), int(meta["width"])
        k = int(meta["num_classes"])
    except (KeyError, TypeError, ValueError):
        raise DataFormatError(f"{meta_path}: height/width/num_classes missing") from None
    size = grid_path.stat().st_size
    if size != h * w * 2:
        raise DataFormatError(
            f"{grid_path}: expected {h * w * 2} bytes for {h}x{w} grid, found {size}"
        )
    grid = np.fromfile(grid_path, dtype="<u2").reshape(h, w).astype(np.int32)
    names = tuple(meta.get("class_names") or ())
    palette = tuple(tuple(int(v) for v in rgb) for rgb in meta.get("palette") or ())
    return LabelMap(grid, k, names, palette)


def save_labels(labels: LabelMap, prefix: str | os.PathLike) -> Path:
    prefix = _label_prefix(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    grid_path = prefix.with_name(prefix.name + LABEL_BIN_SUFFIX)
    meta_path = prefix.with_name(prefix.name + LABEL_JSON_SUFFIX)
    grid_path.write_bytes(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())
    meta = {
        "height": labels.height,
        "width": labels.width,
        "num_classes": labels.num_classes,
        "class_names": list(labels.class_names),
        "palette": [list(rgb) for rgb in labels.palette],
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


# ---------------------------------------------------------------------------
# preprocessing


def drop_bands(cube: HyperCube, discard: Sequence[int]) -> HyperCube:
    """Remove bands by their *original* index (as recorded in ``band_mask``)."""
    if cube.normalized:
        raise ValueError("drop_bands must run before normalize")
    discard = [int(i) for i in discard]
    if len(set(discard)) != len(discard):
        raise ValueError(f"duplicate band indices in discard list: {sorted(discard)}")
    if not discard:
        return cube
    position = {orig: pos for pos, orig in enumerate(cube.band_mask)}
    unknown = [i for i in discard if i not in position]
    if unknown:
        raise ValueError(f"band indices not present in cube: {unknown}")
    drop = {position[i] for i in discard}
    keep = [pos for pos in range(cube.bands) if pos not in drop]
    if not keep:
        raise ValueError("cannot discard every band")
    wl = None
    if cube.wavelengths is not None:
        wl = tuple(cube.wavelengths[p] for p in keep)
    return replace(
        cube,
        data=np.ascontiguousarray(cube.data[:, :, keep]),
        band_mask=tuple(cube.band_mask[p] for p in keep),
        wavelengths=wl,
    )


def scale_to_unit_range(data: np.ndarray, per_band: bool = True) -> np.ndarray:
    """Affine min-max map onto [-1, 1]; a constant range maps to 0."""
    x = data.astype(np.float64)
    axes = (0, 1) if per_band else None
    lo = x.min(axis=axes, keepdims=True)
    hi = x.max(axis=axes, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def normalize(cube: HyperCube, per_band: bool = True) -> HyperCube:
    """Map values onto [-1, 1] by min-max, per band by default (``per_band=False``: whole cube)."""
    if cube.normalized:
        raise ValueError("cube is already normalized")
    return replace(cube, data=scale_to_unit_range(cube.data, per_band), normalized=True)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    bands: int = 16
    num_classes: int = 4
    regions: int = 24
    separation: float = 1.0
    noise: float = 0.1
    unlabeled_fraction: float = 0.25

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) <= 0:
            raise ValueError("height, width and bands must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > self.height * self.width:
            raise ValueError("num_classes exceeds pixel count")
        if self.separation < 0 or self.noise < 0:
            raise ValueError("separation and noise must be non-negative")
        if not 0 <= self.unlabeled_fraction < 1:
            raise ValueError("unlabeled_fraction must lie in [0, 1)")


def _separated_means(rng: np.random.Generator, n: int, bands: int, sep: float) -> np.ndarray:
    means = rng.uniform(0.0, 1.0, size=(n, bands))
    if n < 2 or sep == 0:
        return means
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dmin = dist[np.triu_indices(n, 1)].min()
    if dmin < sep:
        centre = means.mean(axis=0, keepdims=True)
        means = centre + (means - centre) * (sep / dmin) * (1 + 1e-6)
    return means


def synth_dataset(spec: SynthSpec, seed: int) -> tuple[HyperCube, LabelMap]:
    """Voronoi-blob scene with one mean spectrum per class plus Gaussian noise.

    Row 0 of the mean table is a background spectrum used for unlabeled pixels.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    k = spec.num_classes
    n_pix = spec.height * spec.width
    n_regions = min(max(spec.regions, k), n_pix)

    means = _separated_means(rng, k + 1, spec.bands, spec.separation)

    seeds = rng.choice(n_pix, size=n_regions, replace=False)
    region_class = np.empty(n_regions, dtype=np.int32)
    region_class[:k] = np.arange(1, k + 1)
    rest = n_regions - k
    if rest:
        unl = rng.random(rest) < spec.unlabeled_fraction
        region_class[k:] = np.where(unl, 0, rng.integers(1, k + 1, size=rest))

    sy, sx = np.divmod(seeds, spec.width)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
    labels = region_class[np.argmin(d2, axis=-1)]

    data = means[labels]
    if spec.noise > 0:
        data = data + rng.normal(0.0, spec.noise, size=data.shape)
    cube = HyperCube(
        data=np.ascontiguousarray(data, dtype=np.float32),
        band_mask=tuple(range(spec.bands)),
    )
    return cube, LabelMap(labels.astype(np.int32), k)


def class_means(cube: HyperCube, labels: LabelMap) -> np.ndarray:
    """K x B matrix of per-class mean spectra (row c-1 is class c)."""
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    lab = labels.labels.ravel()
    return np.stack([flat[lab == c].mean(axis=0) for c in range(1, labels.num_classes + 1)])


def nearest_mean_predict(cube: HyperCube, means: np.ndarray) -> np.ndarray:
    """Assign each pixel to the closest mean spectrum; returns an H x W grid of 1..K."""
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    d2 = ((flat[:, None, :] - means[None]) ** 2).sum(-1)
    return (np.argmin(d2, axis=1) + 1).reshape(cube.height, cube.width)
