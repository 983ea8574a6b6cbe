# pylint: disable=import-outside-toplevel
"""Setup script for cdite.

Usage:
    pip install .  # Install the package
    pip install -e '.[dev]'  # Editable install with the test and lint tools
"""

from setuptools import find_packages, setup

with open("cdite/__version__.txt", "r", encoding="utf-8") as fh:
    version = fh.read().strip()


with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()


setup(
    name="cdite",
    version=version,
    description="Conformal diffusion intervals for individual treatment effects",
    long_description=long_description,
    long_description_content_type="text/markdown",
    zip_safe=False,
    install_requires=["numpy", "scipy", "pandas", "pyyaml", "joblib>=1.3", "tqdm"],
    extras_require={"dev": ["pytest", "ruff", "black", "mypy", "darglint", "types-PyYAML"]},
    packages=find_packages(include=["cdite", "cdite.*"]),
    package_data={"cdite": ["__version__.txt", "py.typed"]},
    entry_points={"console_scripts": ["cdite=cdite.cli.main:main"]},
    python_requires=">=3.10",
)
