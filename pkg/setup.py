import os

from setuptools import setup

VERSION = "0.1.0"


def get_long_description():
    with open(
        os.path.join(os.path.dirname(os.path.abspath(__file__)), "README.md"),
        encoding="utf8",
    ) as fp:
        return fp.read()


setup(
    name="groupkan",
    description="Grouped Kolmogorov-Arnold segmentation networks on a small numpy autodiff engine.",
    long_description=get_long_description(),
    long_description_content_type="text/markdown",
    license="MIT",
    version=VERSION,
    packages=["groupkan"],
    install_requires=["numpy>=1.20", "scipy>=1.6", "pydantic>=1.8,<2"],
    extras_require={"test": ["pytest"], "lint": ["flake8", "black", "mypy", "isort"]},
    tests_require=["groupkan[test]"],
    entry_points={"console_scripts": ["groupkan = groupkan.cli:main"]},
    python_requires=">=3.8",
)
