from setuptools import setup

setup(
    name='mrflow',
    version='0.1.0',
    packages=['mrflow'],
    description='mrflow is a package for training and sampling multi-resolution continuous normalizing flows on small images.',
    install_requires=[
        "numpy >= 1.17.0",
        "scipy >= 1.0.0",
        "numba >= 0.39.0",
        "tqdm >= 4.24.0",
        "Pillow >= 6.0.0"
    ],
    extras_require={
        'tests': ["pytest >= 4.0.0", "scikit-learn >= 0.20.0"]
    },
    entry_points={
        'console_scripts': ['mrflow=mrflow.cli:main']
    },
)
