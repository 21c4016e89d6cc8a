from setuptools import setup, find_packages


def read(filename):
    try:
        with open(filename, 'r') as f:
            return f.read()
    except IOError:
        return ''


setup(
    name='metaphorboost',
    version='0.1.0',
    description='Metaphor knowledge graph retrieval for video metaphor interpretation, with an LLM-judge evaluation harness',
    long_description=read('README.md'),
    long_description_content_type='text/markdown',
    license='Apache 2.0',
    packages=find_packages(exclude=['tests*']),
    package_data={'metaphorboost': ['templates/*.j2']},
    install_requires=read('requirements.txt').splitlines(),
    extras_require={
        'dev': ['pytest', 'pytest-cov', 'hypothesis']
    },
    entry_points={
        'console_scripts': ['metaphorboost = metaphorboost.cli:main']
    },
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 4 - Beta',
        'License :: OSI Approved :: Apache Software License',
        'Natural Language :: English',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3 :: Only',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]
)
