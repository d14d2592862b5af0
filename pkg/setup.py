from setuptools import setup, find_packages

setup(
    name='weakmag-lab',
    version='0.3.0',
    author='weakmag-lab contributors',
    description='Continuous weak measurement of a collective spin: trajectories, Fokker-Planck densities and field estimation',
    include_package_data=True,
    packages=find_packages(exclude=['tests', 'examples', 'examples.*']),
    python_requires='>=3.10',
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "prompt_toolkit",
    ],
    extras_require={
        'tests': ['pytest>=7'],
    },
    entry_points={
        'console_scripts': [
            'weakmag=source.cli_lab:main',
        ],
    },
)
