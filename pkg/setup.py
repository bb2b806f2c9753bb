"""Build the optional compiled kernel.

The package works without the extension (a pure-numpy fallback is
selected at import time); the Cython kernel just makes training faster.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "vaems.kernels._poisson_cy",
                sources=["src/vaems/kernels/_poisson_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
