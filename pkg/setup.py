import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "fwdsmooth._kernels",
        ["src/fwdsmooth/_kernels.pyx"],
        include_dirs=[np.get_include(), "src/fwdsmooth"],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-mprefer-vector-width=512"],
        libraries=["mvec", "m"],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
