"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a pure-Python
fallback is selected at import time), so any failure here downgrades to
a source-only install instead of aborting.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "specache._kernels",
                ["src/specache/_kernels.pyx"],
                # -ffp-contract=off: the compiled kernels must be
                # bit-identical to the pure-Python fallback, so FMA
                # contraction (which changes rounding) is disabled.
                extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
