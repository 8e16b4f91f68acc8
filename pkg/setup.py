"""Build script for the optional compiled kernels.

The package is fully functional without the extension: wittenlab.kernels
falls back to vectorized numpy implementations when ``wittenlab._kernels``
is not importable. The custom build_ext below therefore treats a failed
compilation as a warning, not an error.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"compiled kernels skipped ({exc}); "
                          "falling back to pure numpy at runtime")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"building {ext.name} failed ({exc}); "
                          "falling back to pure numpy at runtime")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        [Extension(
            "wittenlab._kernels",
            ["src/wittenlab/_kernels.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
