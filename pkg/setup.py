#! /usr/bin/env python3

from setuptools import setup, find_packages

PROJECT_NAME = "mergeforge"
VERSION = "0.1.0"

with open('README.md', encoding='utf-8') as f:
    readme = f.read()


setup(
    name=PROJECT_NAME,
    version=VERSION,
    description='divergence-guided merging of fine-tuned toy language models',
    long_description=readme,
    long_description_content_type='text/markdown',
    license='MIT',
    keywords=['model merging', 'task arithmetic', 'divergence',
              'language model', 'autodiff'],
    packages=find_packages('src'),
    package_dir={'': 'src'},
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.7',
        'pandas>=1.3',
        'PyYAML>=5.4',
        'tqdm>=4.60',
    ],
    entry_points={
        'console_scripts': ['mergeforge = mergeforge.cli:main'],
    },
    zip_safe=False,
    test_suite='tests'
)
