"""Build the optional Cython kernels.

The package works without them: ``pdsde.kernels`` falls back to the numpy
implementations when the extension cannot be imported.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without a compiler toolchain
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "pdsde._kernels",
                ["src/pdsde/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
