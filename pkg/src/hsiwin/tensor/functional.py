"""Differentiable operators used by the classifier.

All image tensors are N x C x H x W. Convolutions are cross-correlations with
zero padding.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .. import kernels
from .core import Tensor

__all__ = [
    "SELU_ALPHA",
    "SELU_LAMBDA",
    "ActivationSpec",
    "conv2d",
    "depthwise_conv2d",
    "layer_norm",
    "BatchNormState",
    "batch_norm",
    "selu",
    "silu",
    "gelu",
    "sigmoid",
    "activate",
    "dropout",
    "linear",
    "se_module",
    "masked_softmax_ce",
]

# canonical self-normalising constants
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "SELU"
    selu_alpha: float = SELU_ALPHA
    selu_lambda: float = SELU_LAMBDA

    def __post_init__(self):
        if self.kind not in ("SELU", "SiLU", "GELU"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.selu_lambda <= 1:
            raise ValueError("SELU lambda must exceed 1")
        if self.selu_alpha <= 0:
            raise ValueError("SELU alpha must be positive")


def _check_conv_args(x: Tensor, stride: int, pad: int):
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ValueError(f"non-positive input dims {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if pad < 0:
        raise ValueError("pad must be >= 0")


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return a[:, :, pad:-pad, pad:-pad]


def _add_bias(out: Tensor, bias: Tensor | None) -> Tensor:
    if bias is None:
        return out
    return out + bias.reshape(1, -1, 1, 1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Regular 2-D convolution, weight O x C x k x k."""
    _check_conv_args(x, stride, pad)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, input has {c}")
    xd, wd = x.data, weight.data

    if kh == kw == 1 and stride == 1 and pad == 0:
        w2 = wd.reshape(o, c)
        xf = xd.reshape(n, c, h * w)
        out = np.matmul(w2, xf).reshape(n, o, h, w)

        def back(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(w2.T, gf).reshape(x.shape)
            gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            return gx, gw

        return _add_bias(Tensor._from_op(out, (x, weight), back, "conv2d"), bias)

    xp = _pad(xd, pad)
    hp, wp = xp.shape[2:]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: N x (C*kh*kw) x (ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    w2 = wd.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def back(g):
        gf = g.reshape(n, o, ho * wo)
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.T, gf).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[
                    :, :, i, j
                ]
        return _unpad(gxp, pad), gw

    return _add_bias(Tensor._from_op(out, (x, weight), back, "conv2d"), bias)


def depthwise_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Per-channel convolution, weight C x k x k."""
    _check_conv_args(x, stride, pad)
    n, c, h, w = x.shape
    if weight.ndim != 3 or weight.shape[0] != c:
        raise ValueError(f"depthwise kernel must be {c} x k x k, got {weight.shape}")
    kh, kw = weight.shape[1:]
    xp = np.ascontiguousarray(_pad(x.data, pad))
    k = np.ascontiguousarray(weight.data)
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    out = kernels.dw_forward(xp, k, stride)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = kernels.dw_grad_input(g, k, stride, hp, wp)
        gk = kernels.dw_grad_kernel(g, xp, kh, kw, stride)
        return _unpad(gx, pad), gk

    return _add_bias(Tensor._from_op(out, (x, weight), back, "depthwise_conv2d"), bias)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the channel axis independently at every (n, y, x) position."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if c < 1:
        raise ValueError("layer_norm needs at least one channel")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, c, 1, 1)
    out = xhat * gd + bias.data.reshape(1, c, 1, 1)

    def back(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), back, "layer_norm")


class BatchNormState:
    """Running per-channel statistics; ``None`` until the first training step."""

    def __init__(self, momentum: float = 0.1):
        self.momentum = momentum
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None


def batch_norm(
    x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState, training: bool, eps: float = 1e-5
) -> Tensor:
    c = x.shape[1]
    gd = gain.data.reshape(1, c, 1, 1)
    bd = bias.data.reshape(1, c, 1, 1)
    if not training:
        if state.mean is None:
            raise RuntimeError("batch_norm in eval mode before any training step")
        mu = state.mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(state.var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - mu) * inv
        out = xhat * gd + bd

        def back_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._from_op(out, (x, gain, bias), back_eval, "batch_norm")

    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    unbiased = var.ravel() * (m / max(m - 1, 1))
    if state.mean is None:
        state.mean = mu.ravel().astype(np.float64)
        state.var = unbiased.astype(np.float64)
    else:
        mom = state.momentum
        state.mean = (1 - mom) * state.mean + mom * mu.ravel()
        state.var = (1 - mom) * state.var + mom * unbiased

    def back(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), back, "batch_norm")


def selu(x: Tensor, alpha: float = SELU_ALPHA, lam: float = SELU_LAMBDA) -> Tensor:
    """lam * x for x > 0, lam * alpha * (exp(x) - 1) otherwise.

    The derivative at exactly 0 is taken from the positive side (lam).
    """
    xd = x.data
    neg = xd <= 0
    ex = np.exp(np.minimum(xd, 0))
    out = np.where(neg, lam * alpha * (ex - 1), lam * xd).astype(x.dtype)
    slope = np.where(xd < 0, lam * alpha * ex, lam).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * slope,), "selu")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return Tensor._from_op(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd / math.sqrt(2.0)))).astype(x.dtype)
    pdf = (np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)).astype(x.dtype)
    return Tensor._from_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def activate(x: Tensor, spec: ActivationSpec) -> Tensor:
    if spec.kind == "SELU":
        return selu(x, spec.selu_alpha, spec.selu_lambda)
    if spec.kind == "SiLU":
        return silu(x)
    return gelu(x)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N x D_in) @ weight (D_in x D_out) + bias."""
    out = x @ weight
    if bias is not None:
        out = out + bias.reshape(1, -1)
    return out


def se_module(x: Tensor, params: dict, spec: ActivationSpec) -> Tensor:
    """Squeeze-and-excitation channel reweighting.

    ``params`` holds ``reduce_w`` (C x C/r), ``reduce_b``, ``expand_w``
    (C/r x C), ``expand_b``.
    """
    n, c = x.shape[:2]
    rw, ew = params["reduce_w"], params["expand_w"]
    if rw.shape[0] != c or ew.shape[1] != c or rw.shape[1] != ew.shape[0]:
        raise ValueError(f"SE weights {rw.shape}/{ew.shape} do not fit {c} channels")
    squeezed = x.mean(axis=(2, 3))
    hidden = activate(linear(squeezed, rw, params.get("reduce_b")), spec)
    scale = sigmoid(linear(hidden, ew, params.get("expand_b")))
    return x * scale.reshape(n, c, 1, 1)


def masked_softmax_ce(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross entropy over pixels where ``mask`` is true.

    ``labels`` hold class ids 1..K (0 = unlabeled); channel ``j`` of
    ``logits`` scores class ``j + 1``.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (n, h, w) or mask.shape != (n, h, w):
        raise ValueError("labels and mask must be N x H x W matching the logits")
    m = int(mask.sum())
    dtype = logits.dtype
    if m == 0:
        warnings.warn("masked_softmax_ce: empty mask, returning zero loss", RuntimeWarning, stacklevel=2)
        return Tensor._from_op(
            np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "masked_ce"
        )
    sel = labels[mask]
    if sel.min() < 1 or sel.max() > k:
        raise ValueError(f"masked labels must lie in 1..{k}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    idx = np.clip(labels - 1, 0, k - 1)
    picked = np.take_along_axis(logp, idx[:, None], axis=1)[:, 0]
    loss = -(picked[mask].astype(np.float64).sum() / m)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
        grad = (p - onehot) * mask[:, None].astype(dtype)
        return (grad * (g / m),)

    return Tensor._from_op(np.asarray(loss, dtype=dtype), (logits,), back, "masked_ce")
