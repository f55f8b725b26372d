"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a pure-numpy twin is selected at
import time), so a failed compile only costs speed.
"""
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "factored_ope._ckernels",
                ["src/factored_ope/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
