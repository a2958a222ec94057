"""
TrusFuse CLI - command-line surface for the trusfuse pipeline
"""

__version__ = "0.1.0"
__author__ = "TrusFuse Team"

from .trus_app import main

__all__ = ["main"]
