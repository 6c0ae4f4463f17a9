import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is selected at import time
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("HSIWIN_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "hsiwin.kernels._native",
                ["src/hsiwin/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                # keep multiply/add unfused so results match the numpy path bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
