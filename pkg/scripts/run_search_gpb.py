#!/usr/bin/env python3
"""Committed bandit-search run: full K=4 space, 50 trials, defaults
otherwise. Writes runs/search_gpb/."""

import sys

from attnsearch import cli

ARGS = [
    "search-gpb",
    "--budget", "50",
    "--seed", "0",
    "--eval-reps", "2",
    "--out", "runs/search_gpb",
]

if __name__ == "__main__":
    sys.exit(cli.main(ARGS + sys.argv[1:]))
