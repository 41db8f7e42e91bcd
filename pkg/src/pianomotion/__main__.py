"""Module entry point so ``python -m pianomotion`` runs the CLI."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
