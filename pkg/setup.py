"""Optional build of the compiled conv kernel.

`pip install .` works without Cython or a C compiler; the package then runs on
the numpy fallback. `python setup.py build_ext --inplace` compiles the
accelerated kernel into src/neurofuscate/kernels/.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "neurofuscate.kernels._convext",
                ["src/neurofuscate/kernels/_convext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
