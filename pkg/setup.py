import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: no FMA contraction, so the compiled kernels are
# bit-identical to the pure NumPy fallback (same rounding per operation).
ext = Extension(
    "m2rnn._kernels",
    ["src/m2rnn/_kernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level="3"))
