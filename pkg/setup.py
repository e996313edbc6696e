#coding=utf-8

from setuptools import setup

setup(
    name='termclust',
    version='0.1.0',
    description='Train a character n-gram term encoder with hard negative mining '
                'and cluster synonymous terms by embedding similarity.',
    packages=['termclust'],
    package_dir={'termclust': 'termclust'},
    python_requires='>=3.8',
    install_requires=['numpy>=1.20'],
    extras_require={'plot': ['matplotlib']},
    entry_points={'console_scripts': ['termclust=termclust.cli:main']},
    setup_requires=['pytest-runner'],
    tests_require=['pytest', 'pytest-timeout'],
    classifiers = [
        'Development Status :: 2 - Pre-Alpha',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Text Processing :: Linguistic'
    ]
)
