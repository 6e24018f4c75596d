from setuptools import setup

with open("README.md") as fh:
    long_desc = fh.read()

setup(
    name='iontrap',
    version='1.0.0',
    description='Axial motion of one and two trapped ions: simulation, fluorescence profiles and fits',
    long_description=long_desc,
    long_description_content_type="text/markdown",
    license='MIT',
    packages=['iontrap'],
    package_data={
        'iontrap': ['py.typed'],
    },
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
        'numba>=0.56',
        'joblib>=1.1',
    ],
    extras_require={
        'test': ['pytest>=7'],
    },
    entry_points={
        'console_scripts': ['iontrap=iontrap.cli:main'],
    },
    zip_safe=False,
    python_requires='>=3.10',
)
