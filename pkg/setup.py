import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure-numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("POINTSLICE_NO_EXT", "0") in ("", "0"):
    ext_modules = cythonize(
        [
            Extension(
                "pointslice._kernels",
                ["src/pointslice/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)
