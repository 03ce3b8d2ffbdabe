#!/usr/bin/env python3
"""Committed differentiable-search run: SG2 preset, position-agnostic
sharing, defaults otherwise. Writes runs/search_diff/."""

import sys

from attnsearch import cli

ARGS = [
    "search-diff",
    "--preset", "sg2",
    "--sharing", "agnostic",
    "--seed", "0",
    "--out", "runs/search_diff",
]

if __name__ == "__main__":
    sys.exit(cli.main(ARGS + sys.argv[1:]))
