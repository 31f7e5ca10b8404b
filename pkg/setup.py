import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernels are used at import time
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("THERMOLOC_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "thermoloc._convolve",
                ["src/thermoloc/_convolve.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
