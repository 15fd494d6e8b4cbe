"""Main entry point for the qmt-hybrid package."""

from qmt_hybrid.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
