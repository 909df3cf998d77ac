import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps multiply and add separately rounded so the
# compiled kernels match the numpy fallback bit for bit.
extensions = [
    Extension(
        "ubp.kernels._spmm",
        ["src/ubp/kernels/_spmm.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
