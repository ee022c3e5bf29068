"""Build the optional compiled kernels; the package works without them."""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing etc.
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: {ext.name} not built ({exc}); using numpy fallback")


def extensions():
    if os.environ.get("MIATTN_NO_EXTENSION"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "miattn.nn._ckernels",
        sources=["src/miattn/nn/_ckernels.pyx"],
        include_dirs=["src/miattn/nn"],
        depends=["src/miattn/nn/_kernels_impl.h"],
        # CPython's own CFLAGS carry -fwrapv, which blocks vectorising the
        # int-indexed kernel loops; the kernels never rely on signed wraparound
        extra_compile_args=["-O3", "-std=c99", "-fopenmp-simd", "-fno-wrapv"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
