#!/usr/bin/env python3
"""Ablation experiment: attack the same transcript with every combination of
the three attack components switched on or off.

    python scripts/run_ablation.py --out results/ablation --seed 0
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
    "data": {"kind": "synthetic", "n_users": 20, "length": 24, "step_budget_m": 500.0,
             "domain_radius_m": 2500.0},
    "model": {"window_len": 3, "hidden_units": 8, "num_cells": 16, "coordinate_scale": None},
    "training": {"rounds": 20, "eta_local": 1.0},
    "attack": {"max_iters": 80, "attack_rate": 1.0, "convergence_tol_m": 1.0},
    "defense": {"mechanism": "none"},
}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    doc = dict(CONFIG, seed=args.seed, out_dir=args.out)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(doc, fh)
        cfg_path = fh.name
    return cli_main(["ablate", "--config", cfg_path, "--threads", str(args.threads)])


if __name__ == "__main__":
    sys.exit(main())
