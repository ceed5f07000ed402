from setuptools import setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(["src/blockspin/_core.pyx"], quiet=True)

setup(ext_modules=ext_modules)
