"""
LIDAR-EPW - Setup Configuration
===============================

Packaging for the LiDAR echo pulse width sensor model.

Author: LIDAR-EPW Team
"""

from pathlib import Path

from setuptools import find_packages, setup

# Read the README file
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text(encoding="utf-8")

# Read requirements
requirements_file = this_directory / "requirements.txt"
requirements = []
if requirements_file.exists():
    with open(requirements_file, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                requirements.append(line)

setup(
    name="lidar-epw",
    version="1.0.0",
    author="LIDAR-EPW Team",
    description="LiDAR sensor model: echo pulse width prediction, echo selection and KPI evaluation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering",
    ],
    packages=find_packages(include=["lidar_epw", "lidar_epw.*"]),
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "lidar-epw=lidar_epw.cli:main",
        ],
    },
    keywords=["lidar", "sensor model", "echo pulse width", "simulation", "point cloud"],
    zip_safe=False,
)
