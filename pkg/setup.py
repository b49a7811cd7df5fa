"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: radarslam._kernels
falls back to the vectorized numpy implementation when the compiled module
is absent.  Building requires Cython and a C compiler:

    python setup.py build_ext --inplace
"""

import os

from setuptools import Extension, setup

PYX = "src/radarslam/_kernels/_core.pyx"

ext_modules = []
try:
    if not os.path.exists(PYX):
        raise ImportError
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "radarslam._kernels._core",
                [PYX],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
