import os

from setuptools import setup

ext_modules = []
if os.environ.get("LOGBRANCH_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pure-Python install; kernels fall back at import
        pass
    else:
        np_random_lib = os.path.join(os.path.dirname(np.__file__), "random", "lib")
        ext_modules = cythonize(
            [
                Extension(
                    "logbranch._kernels",
                    ["src/logbranch/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    library_dirs=[np_random_lib],
                    libraries=["npyrandom", "m"],
                    # no fused multiply-add so results match the Python fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
