import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CMHA_SKIP_EXT"):
    import numpy
    from Cython.Build import cythonize

    # No -ffast-math: the kernels must keep IEEE semantics so the compiled
    # lane and the NumPy fallback stay numerically interchangeable.
    ext_modules = cythonize(
        [
            Extension(
                "cmha._kernels._core",
                ["src/cmha/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
