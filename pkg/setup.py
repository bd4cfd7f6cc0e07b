from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # the package still works through the pure-Python fallback
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("amr._kernels", ["src/amr/_kernels.pyx"],
                   include_dirs=[np.get_include()], optional=True)],
        language_level=3,
    )

setup(ext_modules=ext_modules)
