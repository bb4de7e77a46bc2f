"""Setup script."""
from setuptools import setup

setup(
    name="madseq",
    version="0.1",
    setup_requires=["setuptools"],
    description="Masked autodecoding of multi-task vision sequences.",
    install_requires=["numpy", "scipy", "torch", "Pillow", "PyYAML"],
    extras_require={"test": ["pytest"]},
    provides=["madseq"],
    platforms=["all"],
    python_requires=">=3.9",
    entry_points={"console_scripts": ["madseq=madseq.cli:main"]},
)
