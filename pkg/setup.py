from setuptools import setup
from setuptools import find_namespace_packages

# load the README file.
with open(file="README.md", mode="r") as fh:
    long_description = fh.read()

setup(

    name='demandforge',

    author='Alex Reed',

    author_email='coding.sigma@gmail.com',

    version='0.1.0',

    description='Combined travel demand models (distribution, mode and route choice) solved as convex programs.',

    long_description=long_description,

    long_description_content_type="text/markdown",

    url='https://github.com/areed1192/demandforge',

    install_requires=[
        'numpy>=1.19.0',
        'pandas>=1.0.5',
        'scipy>=1.5.0',
        'networkx>=2.4'
    ],

    keywords='transportation, travel demand, logit, traffic assignment, calibration',

    packages=find_namespace_packages(
        include=['demandforge', 'samples', 'tests'],
        exclude=['configs*']
    ),

    entry_points={
        'console_scripts': [
            'demandforge = demandforge.cli:run'
        ]
    },

    include_package_data=True,

    python_requires='>=3.8',

    classifiers=[

        # I can say what phase of development my library is in.
        'Development Status :: 3 - Alpha',

        # Here I'll add the audience this library is intended for.
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',

        # Here I'll define the license that guides my library.
        'License :: OSI Approved :: MIT License',

        # Here I'll note that package was written in English.
        'Natural Language :: English',

        # Here I'll note that any operating system can use it.
        'Operating System :: OS Independent',

        # Here I'll specify the version of Python it uses.
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',

        # Here are the topics that my library covers.
        'Topic :: Scientific/Engineering :: Mathematics',
        'Topic :: Education'

    ]
)
