import sys

from .cli import cli_main


def main():
    """Main entry point for the package."""
    sys.exit(cli_main())


__all__ = ["main", "cli_main"]
