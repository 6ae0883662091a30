from setuptools import setup, find_packages

setup(
    name="multistop",
    version="0.1.0",
    description="Optimal multiple stopping of extreme-value sequences: DP oracle, ODE curves, closed forms, simulation",
    author="Your Team",
    packages=find_packages(exclude=["examples", "examples.*"]),
    python_requires=">=3.10",
    install_requires=[
        "pyyaml>=6.0",
        "numpy>=1.24",
        "scipy>=1.10",
    ],
    extras_require={
        "test": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            "multistop=multistop.cli:main",
        ],
    },
)
