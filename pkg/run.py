#!/usr/bin/env python
"""
Intertwined EEG
Run script for the command-line interface
"""
import logging
import sys

from intertwined import config
from intertwined.cli import cli_dispatch


def main():
    # Logs go to stderr so --json output on stdout stays parseable
    logging.basicConfig(
        level=getattr(logging, config['LOG_LEVEL'], logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr
    )

    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
