"""Hot inner loops, compiled when available.

The Cython extension ``_native`` is used if it was built; otherwise (or when
``HSIWIN_KERNELS=python`` is set before import) the numpy fallback is used.
``BACKEND`` names the active implementation.
"""
import os
from types import SimpleNamespace

from . import fallback as _fallback

_NAMES = ("dw_forward", "dw_grad_input", "dw_grad_kernel", "chebyshev_overlap_count")

try:
    from . import _native
except ImportError:  # extension not built
    _native = None


def available_backends() -> list[str]:
    return ["native", "python"] if _native is not None else ["python"]


def get_backend(name: str) -> SimpleNamespace:
    """Kernel namespace for ``name`` ("native" or "python")."""
    if name == "native":
        if _native is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        mod = _native
    elif name == "python":
        mod = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return SimpleNamespace(name=name, **{n: getattr(mod, n) for n in _NAMES})


_requested = os.environ.get("HSIWIN_KERNELS", "").strip().lower()
if _requested == "python" or _native is None:
    _active = get_backend("python")
else:
    _active = get_backend("native")

BACKEND = _active.name
dw_forward = _active.dw_forward
dw_grad_input = _active.dw_grad_input
dw_grad_kernel = _active.dw_grad_kernel


def chebyshev_overlap_count(test, train, dist: int) -> int:
    """Number of ``test`` points within Chebyshev distance ``dist`` of any ``train`` point."""
    import numpy as np

    test = np.ascontiguousarray(test, dtype=np.int64).reshape(-1, 2)
    train = np.ascontiguousarray(train, dtype=np.int64).reshape(-1, 2)
    return int(_active.chebyshev_overlap_count(test, train, int(dist)))
