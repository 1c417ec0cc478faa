"""Reward share of a2 for K = 0..8 replicates under every allocation method.

Writes curve.csv (long) and curve_wide.csv (one column per method).
Usage: python scripts/replication_curve.py [--out-dir DIR] [--seed N]
"""

import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("curve", "replication_sweep.yaml", "out/replication_curve"))
