import setuptools

setuptools.setup(
    name='terra_ssl',
    version='1.0.0',
    author='terra_ssl developers',
    description='Terrain-aware self-supervised pretraining for building footprint extraction from elevation models.',
    platforms='Posix; MacOS X',
    packages=setuptools.find_packages(where='./src'),
    package_dir={
        '': 'src'
    },
    include_package_data=True,
    python_requires='>=3.9',
    install_requires=(
        'numpy',
        'scipy',
        'pandas',
        'matplotlib',
        'scikit-learn',
        'tensorflow>=2.16',
        'h5py',
        'pyyaml',
        'tqdm',
    ),
    extras_require={
        'raster': ['rasterio'],
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            'terra-ssl=terra_ssl.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Natural Language :: English',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
)
