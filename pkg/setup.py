import numpy as np
from setuptools import Extension, setup

# The compiled kernel is optional: the package falls back to the numpy
# implementation when the extension is unavailable (see splitnn.kernels).
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "splitnn.kernels._fast",
                ["src/splitnn/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
