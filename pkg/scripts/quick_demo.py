#!/usr/bin/env python3
"""Two-minute desk check: tiny dataset, short prior training, one short
vanilla run and one short full run, then a side-by-side report.

Usage:
    python3 scripts/quick_demo.py [--out runs/demo]
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

FAST = [
    "online_budget=8192", "epochs=4", "proxy_samples=16", "proxy_steps=20",
    "eval_episodes=3", "eval_fraction=0.1",
]


def cli(*args):
    cmd = [sys.executable, "-m", "diffppo.cli", *map(str, args)]
    print("+", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cli("make-dataset", "--env", "pointmass", "--behavior", "pd",
        "--n", 5000, "--seed", 7, "--out", out / "dataset.bin")
    cli("train-prior", "--dataset", out / "dataset.bin",
        "--out", out / "prior.npz", "--steps", 800, "--seed", 11)

    sets = [x for k in FAST for x in ("--set", k)]
    cli("train-online", "--env", "pointmass", "--mode", "vanilla_ppo",
        "--seed", 1, "--run-dir", out / "vanilla", *sets)
    cli("train-online", "--env", "pointmass", "--mode", "full", "--seed", 1,
        "--prior", out / "prior.npz", "--run-dir", out / "full", *sets)

    for name in ("vanilla", "full"):
        summary = json.loads((out / name / "summary.json").read_text())
        print(f"{name:>8}: final return {summary['final_eval_return']:+.2f}, "
              f"wall clock {summary['total_wall_clock_s']:.0f}s")


if __name__ == "__main__":
    main()
