#!/usr/bin/env python

import re

from setuptools import setup, find_packages

with open('README.md') as f:
    long_description = f.read()

with open('momentflow/__init__.py') as f:
    __version__ = re.search(r"^__version__ = '([^']+)'", f.read(), re.M).group(1)

setup(name='momentflow',
      version=__version__,
      description='Propagation of means and variances through feed-forward neural networks',
      long_description=long_description,
      long_description_content_type="text/markdown",
      author='The MomentFlow Authors',
      packages=find_packages(exclude=('tests',)),
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Environment :: Console',
          'Intended Audience :: Education',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: GNU General Public License v3 or later (GPLv3+)',
          'Natural Language :: English',
          'Operating System :: OS Independent',
          'Programming Language :: Python',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          'Topic :: Scientific/Engineering :: Mathematics'
      ],
      license='GPLv3+',
      keywords='neural networks uncertainty moment propagation bayesian dropout',
      python_requires='>=3.9',
      entry_points={
          'console_scripts': [
              'momentflow = momentflow.cli:main'
          ]
      },
      install_requires=[
          'jprops>=2.0.2',
          'numpy>=1.20',
          'scipy>=1.6'
      ],
      package_data={
          'momentflow': ['configs/*.net']
      }
      )
