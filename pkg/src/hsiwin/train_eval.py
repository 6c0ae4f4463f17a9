"""AdamW training over windows, window-level inference and accuracy metrics."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datacube import HyperCube, LabelMap
from .network import Model
from .sampling import TEST, WindowPartition, mirror_pad_array
from .tensor import Tensor, masked_softmax_ce, zero_grad

__all__ = [
    "TrainConfig",
    "AdamWState",
    "adamw_step",
    "stack_windows",
    "train",
    "predict",
    "ConfusionMatrix",
    "MetricsReport",
    "confusion",
    "metrics",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 150
    batch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive, weight_decay >= 0")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _decays(name: str) -> bool:
    # norm gains and biases are exempt from weight decay
    return ".norm." not in name


def adamw_step(params: dict[str, Tensor], state: AdamWState, t: int, cfg: TrainConfig) -> None:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    b1, b2 = cfg.betas
    lr = cfg.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if _decays(name) and cfg.weight_decay:
            update = update + lr * cfg.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)
    state.step = t


# ---------------------------------------------------------------------------
# training


def stack_windows(windows: Sequence[tuple[np.ndarray, np.ndarray]], dtype=np.float32):
    """(w, w, B) / (w, w) pairs -> X (N, B, w, w), Y (N, w, w)."""
    if not windows:
        raise ValueError("no windows given")
    shapes = {lab.shape for _, lab in windows}
    if len(shapes) != 1:
        raise ValueError(f"windows must share one spatial size, got {sorted(shapes)}")
    x = np.stack([c for c, _ in windows]).transpose(0, 3, 1, 2)
    y = np.stack([lab for _, lab in windows])
    return np.ascontiguousarray(x, dtype=dtype), y.astype(np.int64)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_oa: float
    wall_seconds: float


def train(
    model: Model,
    windows: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
) -> list[EpochLog]:
    """Train ``model`` in place; returns one log row per epoch.

    Loss is cross entropy over the labelled pixels of each mini-batch.
    Shuffling and dropout draw from streams derived from ``cfg.seed``.
    """
    x, y = stack_windows(windows, dtype=model.dtype)
    mask = y > 0
    if not mask.any():
        raise ValueError("training windows contain no labelled pixel")
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seq))
    state = AdamWState()
    params = model.params
    n = x.shape[0]
    history = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        counted = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            bm = mask[idx]
            m = int(bm.sum())
            if m == 0:
                continue
            logits = model.forward(x[idx], training=True, rng=dropout_rng)
            loss = masked_softmax_ce(logits, y[idx], bm)
            zero_grad(params.values())
            loss.backward(params=params.values())
            step += 1
            adamw_step(params, state, step, cfg)
            loss_sum += float(loss.data) * m
            pred = np.argmax(logits.data, axis=1) + 1
            correct += int((pred[bm] == y[idx][bm]).sum())
            counted += m
        row = EpochLog(epoch, loss_sum / counted, correct / counted, time.perf_counter() - t0)
        history.append(row)
        log.debug("epoch %d loss %.4f oa %.4f", epoch, row.mean_loss, row.train_oa)
    return history


# ---------------------------------------------------------------------------
# inference


def predict(
    model: Model,
    cube: HyperCube,
    partition: WindowPartition,
    which: int = TEST,
    batch_size: int = 64,
    trace: list | None = None,
) -> np.ndarray:
    """Class ids over the padded grid for every window tagged ``which``; 0 elsewhere.

    Each selected window is forwarded exactly once. Ties in the argmax go to
    the lowest class id. ``trace``, if given, receives the grid coordinates
    of each forwarded window.
    """
    if cube.bands != model.config.input_bands:
        raise ValueError(
            f"model expects {model.config.input_bands} bands, cube has {cube.bands}"
        )
    if (cube.height, cube.width) not in (partition.dims, partition.padded_dims):
        raise ValueError("cube dims do not match the partition")
    w = partition.window
    data = mirror_pad_array(cube.data, w)
    coords = partition.windows(which)
    out = np.zeros(partition.padded_dims, dtype=np.int32)
    for start in range(0, len(coords), batch_size):
        chunk = coords[start : start + batch_size]
        xb = np.stack([data[r * w : (r + 1) * w, c * w : (c + 1) * w] for r, c in chunk])
        xb = np.ascontiguousarray(xb.transpose(0, 3, 1, 2), dtype=model.dtype)
        logits = model.forward(xb, training=False).data
        pred = np.argmax(logits, axis=1).astype(np.int32) + 1
        for (r, c), p in zip(chunk, pred):
            out[r * w : (r + 1) * w, c * w : (c + 1) * w] = p
        if trace is not None:
            trace.extend(chunk)
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """counts[i, j]: pixels of true class i+1 predicted as class j+1."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(
    pred: np.ndarray, truth: LabelMap, partition: WindowPartition, which: int = TEST
) -> ConfusionMatrix:
    """Tally labelled original-coordinate pixels inside the ``which`` windows.

    Mirrored padding pixels are never scored.
    """
    h, w = truth.height, truth.width
    if (h, w) != partition.dims:
        raise ValueError(f"truth is {h}x{w} but partition was built for {partition.dims}")
    if pred.shape[0] < h or pred.shape[1] < w:
        raise ValueError(f"prediction {pred.shape} smaller than truth {(h, w)}")
    pred = pred[:h, :w]
    scope = (partition.pixel_tags()[:h, :w] == which) & (truth.labels > 0)
    p = pred[scope].astype(np.int64)
    t = truth.labels[scope].astype(np.int64)
    if np.any(p == 0):
        raise ValueError("unpredicted pixel (0) inside the scored scope")
    k = truth.num_classes
    if p.size and (p.max() > k or p.min() < 1):
        raise ValueError(f"predictions must lie in 1..{k}")
    counts = np.bincount((t - 1) * k + (p - 1), minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts.astype(np.int64))


@dataclass
class MetricsReport:
    per_class_pa: list[float]
    oa: float
    aa: float
    kappa: float
    confusion: list[list[int]]
    n_test_pixels: int

    def to_json(self) -> dict:
        return asdict(self)


def metrics(cm: ConfusionMatrix | np.ndarray, pa_convention: str = "column") -> MetricsReport:
    """Per-class PA, OA, AA and Cohen's kappa.

    ``pa_convention="column"`` divides the diagonal by the predicted-class
    totals p_+j; ``"row"`` divides by the true-class totals p_j+ (recall).
    A class with a zero denominator gets PA 0.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    counts = counts.astype(np.float64)
    n = counts.sum()
    if n <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)  # p_i+
    cols = counts.sum(axis=0)  # p_+j
    if pa_convention == "column":
        denom = cols
    elif pa_convention == "row":
        denom = rows
    else:
        raise ValueError(f"unknown PA convention {pa_convention!r}")
    pa = np.divide(diag, denom, out=np.zeros_like(diag), where=denom > 0)
    oa = diag.sum() / n
    aa = math.fsum(pa.tolist()) / len(pa)  # correctly rounded, so independent of class order
    chance = float(rows @ cols)
    denom_k = n * n - chance
    if denom_k == 0:
        kappa = 1.0  # only reachable with all mass on one diagonal cell
    else:
        kappa = (n * diag.sum() - chance) / denom_k
    return MetricsReport(
        per_class_pa=[float(v) for v in pa],
        oa=float(oa),
        aa=float(aa),
        kappa=float(kappa),
        confusion=counts.astype(np.int64).tolist(),
        n_test_pixels=int(n),
    )
