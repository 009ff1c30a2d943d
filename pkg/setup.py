"""Build script.

The Cython kernel extension is optional: if it cannot be compiled the
install still succeeds and the package falls back to the pure-Python
kernels at import time.  Set CHRONOLM_SKIP_EXT=1 to skip the extension
entirely.
"""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, cythonize failure, ...
            sys.stderr.write(f"warning: skipping compiled kernels ({exc})\n")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            sys.stderr.write(
                f"warning: could not build {ext.name} ({exc}); "
                "pure-Python kernels will be used\n"
            )


ext_modules = []
if os.environ.get("CHRONOLM_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "chronolm.tokenizer._kernels_fast",
                    ["src/chronolm/tokenizer/_kernels_fast.pyx"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
