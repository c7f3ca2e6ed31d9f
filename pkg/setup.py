"""
Usage: pip install -e .
       python setup.py install
       python setup.py bdist_wheel
       python setup.py sdist
"""

from codecs import open
from os import path
from setuptools import setup

# Set the long_description from the README
here = path.abspath(path.dirname(__file__))
with open(path.join(here, "README.rst"), encoding="utf-8") as f:
    long_description = f.read()

setup(
    name="ttaforge",
    # Version comes from `git describe` through setuptools_scm and is written to ttaforge/_version.py at build time
    use_scm_version={"write_to": "ttaforge/_version.py"},
    description="Test-time adaptive object detection with multi-modal prompt mean teachers and an instance dynamic "
    "memory, exercisable end-to-end on a toy detector and synthetic corrupted image streams.",
    long_description=long_description,
    # Choose your license
    license="BSD",
    # See https://pypi.python.org/pypi?%3Aaction=list_classifiers
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: BSD License",
        "Programming Language :: Python :: 3.8",
    ],
    keywords="test-time adaptation object detection prompt tuning mean teacher",
    packages=[
        "ttaforge",
        "ttaforge.adapt",
        "ttaforge.augment",
        "ttaforge.backend",
        "ttaforge.core",
        "ttaforge.data",
        "ttaforge.evalkit",
        "ttaforge.execution",
        "ttaforge.formats",
        "ttaforge.idm",
        "ttaforge.msg",
        "ttaforge.tests",
    ],
    package_dir={},
    python_requires=">=3.8",
    # List run-time dependencies here.  These will be installed by pip when
    # your project is installed.
    install_requires=["numpy", "scipy", "dask", "distributed", "appdirs", "Pillow", "pandas", "tqdm"],
    setup_requires=["setuptools_scm"],
    # $ pip install -e .[tests]
    extras_require={"tests": ["pytest", "coverage"]},
    package_data={},
    entry_points={"console_scripts": ["ttaforge = ttaforge.cli:main"]},
    ext_modules=[],
    include_package_data=True,
)
