"""Pure numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np


def dw_forward(x, k, stride):
    n, c, hp, wp = x.shape
    kh, kw = k.shape[1:]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += xs * k[None, :, i, j, None, None]
    return out


def dw_grad_input(gout, k, stride, hp, wp):
    n, c, ho, wo = gout.shape
    kh, kw = k.shape[1:]
    gx = np.zeros((n, c, hp, wp), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                gout * k[None, :, i, j, None, None]
            )
    return gx


def dw_grad_kernel(gout, x, kh, kw, stride):
    n, c, ho, wo = gout.shape
    gk = np.zeros((c, kh, kw), dtype=gout.dtype)
    g64 = gout.astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            gk[:, i, j] = np.einsum("nchw,nchw->c", g64, xs.astype(np.float64))
    return gk


def chebyshev_overlap_count(test, train, dist):
    test = np.asarray(test, dtype=np.int64)
    train = np.asarray(train, dtype=np.int64)
    if len(test) == 0 or len(train) == 0:
        return 0
    count = 0
    # chunked to bound the pairwise table
    for start in range(0, len(test), 1024):
        t = test[start : start + 1024]
        d = np.abs(t[:, None, :] - train[None, :, :]).max(axis=-1)
        count += int((d <= dist).any(axis=1).sum())
    return count
