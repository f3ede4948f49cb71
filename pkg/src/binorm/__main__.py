"""Entry point for running binorm as a module."""

from binorm.cli import run

if __name__ == "__main__":
    run()
