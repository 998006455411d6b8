import os

import numpy as np
from setuptools import Extension, setup

# CRFGAN_NO_EXT=1 skips the compiled kernels; the numpy fallback is used at import.
ext_modules = []
if not os.environ.get("CRFGAN_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "crfgan._kernels",
            ["src/crfgan/_kernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)
