"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here downgrades to a pure-Python install
instead of aborting.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("AUDIOMORPH_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "audiomorph.kernels._ckernels",
                    ["src/audiomorph/kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # pragma: no cover - depends on build host
        print(f"warning: skipping Cython extension build ({exc}); "
              "falling back to the pure numpy kernels", file=sys.stderr)
        ext_modules = []

setup(ext_modules=ext_modules)
