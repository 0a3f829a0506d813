"""Build script for the optional compiled kernels.

Project metadata lives in pyproject.toml.  When Cython or a compiler is
missing the package still installs and runs on the numpy fallback.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("CRYSTAL_PIRNN_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("crystal_pirnn._kernels", ["src/crystal_pirnn/_kernels.pyx"],
                       include_dirs=[np.get_include()], extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
