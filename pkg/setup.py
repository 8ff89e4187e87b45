#!/usr/bin/env python

from setuptools import find_packages, setup

setup(
    name="HaloMD",
    version="0.1.0",
    description="Desk-scale MD with a local deep potential on a virtual domain decomposition",
    packages=find_packages("src"),
    package_dir={"": "src"},
    python_requires=">=3.9",
    install_requires=[
        "ase>=3.22",
        "cryptography>=35.0.0",
        "numpy>=1.21",
        "pandas>=1.3",
        "scipy>=1.7",
    ],
    entry_points={"console_scripts": ["halomd = halomd.cli:main"]},
)
