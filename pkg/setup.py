"""Build script. The Cython scan kernels are optional: if Cython or a C
compiler is unavailable the package installs pure-Python and the numpy
fallback is selected at import time."""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "frann._kernels._scan",
                ["src/frann/_kernels/_scan.pyx"],
                # fp-contract off: keep mul+add separate so scores stay
                # bit-identical to the numpy fallback
                extra_compile_args=["-O3", "-ffp-contract=off"],
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
