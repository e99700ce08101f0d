#!/usr/bin/env python3
"""Exact metric-privacy audit of the graph mechanisms on random domains.

    python scripts/run_audit.py --out results/audit
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from stgia.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/audit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--domains", type=int, default=20)
    ap.add_argument("--epsilons", default="0.5,1,2")
    args = ap.parse_args()
    return cli_main([
        "audit", "--out", args.out, "--seed", str(args.seed),
        "--domains", str(args.domains), "--epsilons", args.epsilons,
    ])


if __name__ == "__main__":
    sys.exit(main())
