import os

import numpy as np
from setuptools import Extension, setup

# The numpy fallback is always available; a failed compile must not block install.
ext_modules = []
if not os.environ.get("IAUNET_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "iaunet.nn._ckernels",
                    ["src/iaunet/nn/_ckernels.pyx"],
                    include_dirs=[np.get_include(), "src/iaunet/nn"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no FMA contraction, so results match the numpy kernels bit-for-bit;
                    # no-math-errno only lets sqrt vectorize
                    depends=["src/iaunet/nn/_rmsprop.h"],
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-math-errno"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
