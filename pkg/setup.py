from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

# Default requirements if file not found
default_requirements = [
    "numpy>=1.24",
    "scipy>=1.10",
    "pandas>=2.0",
    "click==8.1.3",
    "python-dotenv==1.0.0",
    "tqdm==4.66.1"
]

# Try to read requirements from file, fallback to defaults if file doesn't exist
try:
    with open("requirements.txt", "r", encoding="utf-8") as fh:
        requirements = [line for line in fh.read().splitlines()
                        if line and not line.startswith("pytest")]
except FileNotFoundError:
    requirements = default_requirements

setup(
    name="intertwined-eeg",
    version="0.1.0",
    author="Intertwined EEG Team",
    description="Intertwined time/space networks for EEG trial classification, with baselines, sweeps and rank statistics",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["run"],
    include_package_data=True,
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={
        "console_scripts": [
            "intertwined-eeg=run:main",
        ],
    },
)
