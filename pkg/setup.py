"""Build script for the optional compiled kernel core.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); the Cython module only accelerates the conv/pool
inner loops. A failed extension build therefore degrades to a warning.
"""

import sys

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "msfuse.kernels._core",
                ["src/msfuse/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"msfuse: skipping compiled kernels ({exc})", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
