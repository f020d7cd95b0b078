"""Build script for the optional compiled warp kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the extension only accelerates the bilinear warp
inner loop.  -ffp-contract=off keeps the compiled kernel bit-identical to
the numpy path (no FMA contraction).
"""

import sys

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    import numpy as np

    ext_modules = cythonize(
        "src/robometer/_warp_cy.pyx",
        language_level="3",
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
    for ext in ext_modules:
        ext.include_dirs.append(np.get_include())
        ext.extra_compile_args += ["-O3", "-ffp-contract=off"]
except ImportError as exc:
    print(f"warp kernel extension skipped ({exc}); using numpy fallback", file=sys.stderr)

setup(ext_modules=ext_modules)
