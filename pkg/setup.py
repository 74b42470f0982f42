"""
Seqinit - text-encoder item initialisation lab for sequential recommenders

This setup.py exists for backwards compatibility with older pip versions.
Main configuration is in pyproject.toml.
"""

from setuptools import setup

if __name__ == "__main__":
    setup()
