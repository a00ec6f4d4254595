"""
Entry point for the resteer command line

Run it with:
python -m src.cli.main --help
"""

from . import cli

if __name__ == '__main__':
    cli(prog_name="resteer")
