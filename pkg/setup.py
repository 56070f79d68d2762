import os

from setuptools import setup

ext_modules = []
if os.environ.get("PCAD_NO_EXTENSION", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("pcad._kernels", ["src/pcad/_kernels.pyx"], include_dirs=[numpy.get_include()],
                       extra_compile_args=["-O3", "-fno-trapping-math", "-fno-math-errno"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            language_level=3,
        )

setup(ext_modules=ext_modules)
