import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "r3denoise.kernels._conv_ext",
                ["src/r3denoise/kernels/_conv_ext.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-march=native"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

# The compiled extension is an accelerator only; the package falls back to the
# pure-numpy kernels when the build is unavailable.
setup(ext_modules=ext_modules)
