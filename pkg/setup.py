"""Build script: compiles the optional C core for the particle engine.

If no C compiler (or Cython) is available the build falls back to a
pure-python install; the engine then selects the numpy backend at import
time. Run ``python -m bbmlab.engine`` after installing to see which
backend is active.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "bbmlab.engine._core",
                ["src/bbmlab/engine/_core.pyx"],
                include_dirs=[numpy.get_include()],
                # -ffp-contract=off: FMA contraction would change step rounding
                # relative to the numpy backend, breaking bit-identical parity
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    print(f"bbmlab: compiled core disabled ({exc!r}); installing pure-python engine",
          file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
