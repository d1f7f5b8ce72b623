#!/usr/bin/env python
import os

from setuptools import find_packages, setup

with open(os.path.join(os.path.dirname(__file__), "README.rst")) as f:
    long_description = f.read()

requirements = [
    "numpy>=1.21",
    "prompt_toolkit>=3.0.29,<3.1.0",
    "scikit-learn>=1.0",
    "scipy>=1.7",
    "Pillow>=9.0",
]


setup(
    name="egn",
    version="0.1",
    license="LICENSE",
    description="Exemplar guided prediction of gene expression from tissue image windows.",
    long_description=long_description,
    packages=find_packages(".", exclude=["tests"]),
    install_requires=requirements,
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["egn = egn.cli:main"]},
)
