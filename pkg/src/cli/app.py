#!/usr/bin/env python3
"""
TrusFuse CLI entry point.
Commands: gen-data, train, eval, ablate, cam
"""

import sys
from pathlib import Path

# Add src to path to import modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from cli.trus_app import app, main

if __name__ == "__main__":
    main()
