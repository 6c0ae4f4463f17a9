import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import overlap_count_pairwise
from hsiwin import kernels

BACKENDS = kernels.available_backends()
python = kernels.get_backend("python")


def loop_dw_forward(xp, k, stride):
    n, c, hp, wp = xp.shape
    _, kh, kw = k.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = (patch * k[None]).sum(axis=(2, 3))
    return out


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_dw_forward_matches_loop(rng, name, stride, dtype):
    be = kernels.get_backend(name)
    xp = rng.normal(size=(2, 3, 7, 8)).astype(dtype)
    k = rng.normal(size=(3, 3, 3)).astype(dtype)
    out = be.dw_forward(xp, k, stride)
    assert out.dtype == dtype
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(out, loop_dw_forward(xp.astype(np.float64), k.astype(np.float64), stride), rtol=tol, atol=tol)


@pytest.mark.skipif("native" not in BACKENDS, reason="compiled kernels not built")
@pytest.mark.parametrize("stride", [1, 2])
def test_native_matches_fallback(rng, stride):
    native = kernels.get_backend("native")
    x = rng.normal(size=(4, 6, 9, 9)).astype(np.float32)
    k = rng.normal(size=(6, 3, 3)).astype(np.float32)
    f_n, f_p = native.dw_forward(x, k, stride), python.dw_forward(x, k, stride)
    # same accumulation order, so forward and input gradient are bit-identical
    assert f_n.tobytes() == f_p.tobytes()
    g = rng.normal(size=f_n.shape).astype(np.float32)
    assert native.dw_grad_input(g, k, stride, 9, 9).tobytes() == python.dw_grad_input(g, k, stride, 9, 9).tobytes()
    np.testing.assert_allclose(native.dw_grad_kernel(g, x, 3, 3, stride),
                               python.dw_grad_kernel(g, x, 3, 3, stride), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("name", BACKENDS)
def test_dw_grad_input_is_adjoint(rng, name):
    # <forward(x), g> == <x, grad_input(g)> for the linear map x -> forward(x)
    be = kernels.get_backend(name)
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(3, 3, 3))
    y = be.dw_forward(x, k, 2)
    g = rng.normal(size=y.shape)
    lhs = float((y * g).sum())
    rhs = float((x * be.dw_grad_input(g, k, 2, 8, 8)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)
    gk = be.dw_grad_kernel(g, x, 3, 3, 2)
    assert float((gk * k).sum()) == pytest.approx(lhs, rel=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_chebyshev_count(rng, name):
    be = kernels.get_backend(name)
    test = rng.integers(0, 40, size=(300, 2)).astype(np.int64)
    train = rng.integers(0, 40, size=(80, 2)).astype(np.int64)
    for d in (0, 1, 3):
        assert be.chebyshev_overlap_count(test, train, d) == overlap_count_pairwise(test, train, d)
    assert be.chebyshev_overlap_count(test, train[:0], 2) == 0


def test_wrapper_accepts_lists():
    assert kernels.chebyshev_overlap_count([[0, 0], [5, 5]], [[1, 1]], 1) == 1


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("gpu")


def test_env_var_forces_fallback():
    env = dict(os.environ, HSIWIN_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import hsiwin.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
