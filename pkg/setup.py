"""Build hook for the optional compiled kernel backend.

The package is pure Python plus one Cython extension holding the hot
numeric kernels. If Cython or a C compiler is unavailable the build
falls back to a pure-Python wheel; the kernels then run on the numpy
backend selected at import time (see bevgraph/autodiff/kernels.py).
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "bevgraph.autodiff._ckernels",
                ["src/bevgraph/autodiff/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
