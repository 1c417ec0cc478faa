"""Two near-identical sellers; a2 submits one replicate under an observational lift.

Usage: python scripts/replication_demo.py [--out-dir DIR] [--seed N]
"""

import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("run", "replication_demo.yaml", "out/replication_demo"))
