# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause
import pathlib

from setuptools import setup, find_packages


def get_version(version_file):
    locls = {}
    exec(open(version_file).read(), {}, locls)
    return locls["__version__"]


root = pathlib.Path(__file__).parent.resolve()
readme_file = root / "README.md"
version_file = root / "src" / "kinedecode" / "_version.py"


if __name__ == "__main__":
    setup(
        name="kinedecode",
        version=get_version(version_file),
        author="kinedecode contributors",
        description="EEG/EMG hand-kinematics decoding with a confidence-gated copilot",
        long_description=readme_file.read_text(encoding="utf-8"),
        long_description_content_type="text/markdown",
        packages=find_packages("src"),
        package_dir={"": "src"},
        package_data={"kinedecode.kinematics": ["*.arm"]},
        install_requires=[
            "numpy>=1.20",
            "scipy>=1.6",
        ],
        entry_points={
            "console_scripts": ["kinedecode = kinedecode.cli:main"],
        },
        python_requires='>=3.7'
    )
