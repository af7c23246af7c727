import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

with open("requirements.txt", "r") as fh:
    install_requires = [line.strip() for line in fh
                        if line.strip() and not line.startswith('pytest')]

setuptools.setup(
    name="graspflow",
    version="0.1.0",
    description="Flow-based generative grasp synthesis from partial point clouds",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['tests', 'examples', 'examples.*']),
    install_requires=install_requires,
    scripts=['graspflowctl.py'],
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Intended Audience :: Science/Research",
    ],
    python_requires='>=3.10',
)
