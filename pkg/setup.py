from setuptools import setup, find_packages
import glob

setup(
    name='qdplace',
    package_dir={'': 'src'},
    packages=find_packages('src'),
    scripts=glob.glob('src/scripts/*.py'),
    use_scm_version={'fallback_version': '0.1.0'},
    setup_requires=['setuptools_scm'],
    include_package_data=True,
    package_data={'qdplace': ['config.yml', 'data/topologies/*.json', 'data/grids/*.yml']},
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'numba',
        'networkx',
        'importlib-resources',
        'fsspec',
        'dask',
        'pyyaml',
        'typer',
    ],
    extras_require={
        'monitor': ['psutil'],
    },
    license='MIT',
    description='queue-aware capacitated p-median placement: exact convex, linearized MILP and p-median solvers'
)
