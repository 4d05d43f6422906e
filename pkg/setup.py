"""Build script for the compiled kernel extension.

The extension is optional at runtime: mpolar falls back to the pure-numpy
kernels when the import fails, so a failed compile only costs performance.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "mpolar._kernels",
        sources=["src/mpolar/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
