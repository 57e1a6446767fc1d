import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math: the compiled kernels must stay bit-identical to the numpy fallback.
extensions = [
    Extension(
        "tednet.kernels._ckernels",
        ["src/tednet/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
