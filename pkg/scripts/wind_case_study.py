"""Wind case study with an interventional lift and a K=4 replication attack.

Uses the synthetic stand-in by default. Pass --csv to use configs/wind_csv.yaml,
which expects an hourly file at data/wind.csv.
Usage: python scripts/wind_case_study.py [--csv] [--out-dir DIR] [--seed N]
"""

import sys

from _common import run

if __name__ == "__main__":
    config = "wind_standin.yaml"
    if "--csv" in sys.argv:
        sys.argv.remove("--csv")
        config = "wind_csv.yaml"
    sys.exit(run("run", config, "out/wind_case_study"))
