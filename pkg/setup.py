"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure-Python twin is selected at
import time), so a failed compile must not fail the install.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("GRAMDASH_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            "src/gramdash/_kernels_cy.pyx",
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except Exception:
        ext_modules = []

setup(ext_modules=ext_modules)
