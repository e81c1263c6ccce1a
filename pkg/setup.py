#!/usr/bin/env python3
"""Setup script for tbad-synth."""

from setuptools import setup, find_packages
import os

# Read requirements.txt
def read_requirements():
    """Read runtime requirements from requirements.txt file."""
    requirements_path = os.path.join(os.path.dirname(__file__), 'requirements.txt')
    if os.path.exists(requirements_path):
        with open(requirements_path, 'r') as f:
            lines = [line.strip() for line in f]
        # Test dependencies live after the marker comment
        runtime = []
        for line in lines:
            if line.startswith('# Test dependencies'):
                break
            if line and not line.startswith('#'):
                runtime.append(line)
        return runtime
    return []

# Read README for long description
def read_readme():
    """Read README.md for long description."""
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return ""

setup(
    name="tbad-synth",
    version="0.1.0",
    description="Diffusion synthesis of Type-B aortic dissection CTA phantoms with LoRA fine-tuning and evaluation",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    author="TBAD Synth Team",
    author_email="noreply@example.com",
    license="MIT",

    # Package configuration
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.9",

    # Dependencies
    install_requires=read_requirements(),

    # Entry points for CLI
    entry_points={
        'console_scripts': [
            'tbad-synth=tbad_synth.cli:main',
        ],
    },

    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Image Processing",
    ],

    keywords="diffusion lora cta aortic-dissection synthetic-data fid ms-ssim tsne",

    include_package_data=True,
    zip_safe=False,
)
