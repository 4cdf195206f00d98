"""Build script for the optional compiled assignment kernel.

The package works without it: ``prvr.matching`` falls back to a pure-Python
implementation of the same algorithm when the extension is missing.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PRVR_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "prvr._assign_ext",
                    ["src/prvr/_assign_ext.pyx"],
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

setup(ext_modules=ext_modules)
