#!/usr/bin/env python3
"""Privacy-utility trade-off experiment: defended training followed by the
attack, across mechanisms and privacy budgets, averaged over seeds.

    python scripts/run_tradeoff.py --out results/tradeoff --seeds 10
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from stgia.cli import main as cli_main

CONFIG = {
    "network": {"kind": "grid", "rows": 10, "cols": 10, "spacing_m": 1000.0},
    "data": {"kind": "synthetic", "n_users": 10, "length": 18, "step_budget_m": 500.0,
             "domain_radius_m": 4500.0},
    "model": {"window_len": 3, "hidden_units": 8, "num_cells": 25, "coordinate_scale": None},
    "training": {"rounds": 10, "eta_local": 1.0},
    "attack": {"max_iters": 80, "attack_rate": 1.0, "convergence_tol_m": 1.0},
    "defense": {"mechanism": "none"},
}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/tradeoff")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epsilons", default="1,5,10,20,50")
    ap.add_argument("--mechanisms", default="dpsgd,geoi,geogi,pgem_adaptive")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    doc = dict(CONFIG, seed=args.seed, out_dir=args.out)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(doc, fh)
        cfg_path = fh.name
    return cli_main([
        "tradeoff", "--config", cfg_path, "--seeds", str(args.seeds),
        "--epsilons", args.epsilons, "--mechanisms", args.mechanisms,
        "--threads", str(args.threads),
    ])


if __name__ == "__main__":
    sys.exit(main())
