"""Setup script for pixelveil"""

from setuptools import setup, find_packages
from pathlib import Path

# Read README
readme_path = Path(__file__).parent / "README.md"
if readme_path.exists():
    long_description = readme_path.read_text()
else:
    long_description = "pixelveil - dispersed-pixel backdoor triggers, theory and defenses"

setup(
    name="pixelveil",
    version="0.1.0",
    author="PixelVeil Team",
    description="Imperceptible dispersed-pixel backdoor triggers and the defenses they face",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/pixelveil/pixelveil",
    packages=find_packages(exclude=["tests*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Security",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "scikit-learn>=1.1",
        "scikit-image>=0.19",
        "pycryptodome>=3.15",
        "PyYAML>=6.0",
        "tqdm>=4.60",
    ],
    extras_require={
        "dev": ["pytest>=7.0", "pytest-cov>=4.0", "pytest-timeout>=2.1", "black", "mypy"],
    },
    entry_points={
        "console_scripts": [
            "pixelveil=pixelveil.cli:main",
        ],
    },
)
