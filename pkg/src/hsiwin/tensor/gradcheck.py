"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .core import Tensor, zero_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    n_coords: int = 20,
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``inputs``
    (each a float64 leaf with ``requires_grad``). ``n_coords`` coordinates are
    drawn at random across all inputs, weighted by size.

    The error denominator is floored at the RMS gradient of the coordinate's
    tensor: near a stationary point the O(eps^2) truncation term would
    otherwise dominate a vanishing gradient.
    """
    tensors = list(inputs.values())
    zero_grad(tensors)
    fn().backward(params=tensors)
    analytic = {name: t.grad.copy() for name, t in inputs.items()}
    scale = {name: float(np.sqrt(np.mean(g * g))) for name, g in analytic.items()}

    rng = np.random.Generator(np.random.PCG64(seed))
    names = list(inputs)
    sizes = np.array([inputs[n].size for n in names], dtype=np.float64)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = inputs[name]
        flat = t.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric, max(scale[name], 1e-12)))
    return worst
