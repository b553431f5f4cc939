import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    # No -ffast-math: the reference (numpy) route must match bit-for-bit.
    ext_modules = cythonize(
        [
            Extension(
                "bodyforge.kernels._native",
                ["src/bodyforge/kernels/_native.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
