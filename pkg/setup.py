"""Build script for the compiled convolution kernels.

The extension is optional: if Cython or a C compiler is unavailable the
package installs anyway and v4d.kernels falls back to the numpy backend.
"""

import sys

from setuptools import Extension, setup


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"v4d: skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    ext = Extension(
        "v4d.kernels._ext",
        ["src/v4d/kernels/_ext.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=_extensions())
