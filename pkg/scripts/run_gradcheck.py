#!/usr/bin/env python3
"""Finite-difference gradient audit: every numerics primitive plus the
end-to-end loss on a small two-snippet model. Exit code 3 on failure.

Usage: python3 scripts/run_gradcheck.py [--seed 0]
"""

import sys

from taldet.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck"] + sys.argv[1:]))
