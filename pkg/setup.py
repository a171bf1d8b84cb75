"""Build script for the optional compiled kernels.

pip install -e . --no-build-isolation
python setup.py build_ext --inplace
"""
import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; biomap.kernels falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("BIOMAP_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "biomap._ckernels",
                ["src/biomap/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: compiled and numpy paths must round identically
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "embedsignature": True,
        },
    )

setup(ext_modules=ext_modules)
