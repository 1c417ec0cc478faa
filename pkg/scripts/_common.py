"""Shared helper: run a shipped config through the CLI and echo its summary."""

import sys
from pathlib import Path

from regmarket.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(verb: str, config: str, default_out: str) -> int:
    argv = sys.argv[1:]
    out = argv[argv.index("--out-dir") + 1] if "--out-dir" in argv else default_out
    rest = [a for i, a in enumerate(argv) if a != "--out-dir" and (i == 0 or argv[i - 1] != "--out-dir")]
    code = main([verb, str(ROOT / "configs" / config), "--out-dir", out, *rest])
    summary = Path(out) / "summary.txt"
    if code == 0 and summary.exists():
        print(summary.read_text(), end="")
    return code
