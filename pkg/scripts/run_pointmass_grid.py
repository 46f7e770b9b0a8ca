#!/usr/bin/env python3
"""Full PointMass experiment: logged dataset -> prior -> seed x mode grid -> report.

Runs everything through the CLI entry points so the artifacts match what a
user would get from the command line. Serial by design (the runs are cheap
and single-core machines are the common case here).

Usage:
    python3 scripts/run_pointmass_grid.py --out runs/pointmass \
        --modes vanilla_ppo full no_vg --seeds 1 2 3 4 5 --budget 100000
"""

import argparse
import subprocess
import sys
from pathlib import Path


def cli(*args):
    cmd = [sys.executable, "-m", "diffppo.cli", *map(str, args)]
    print("+", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pointmass")
    ap.add_argument("--env", default="pointmass")
    ap.add_argument("--modes", nargs="+",
                    default=["vanilla_ppo", "full", "no_vg", "no_pet"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3, 4, 5])
    ap.add_argument("--budget", type=int, default=100_000)
    ap.add_argument("--dataset-size", type=int, default=30_000)
    ap.add_argument("--prior-steps", type=int, default=3000)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = out / "dataset.bin"
    prior = out / "prior.npz"

    if not dataset.exists():
        cli("make-dataset", "--env", args.env, "--behavior", "pd",
            "--n", args.dataset_size, "--seed", 7, "--out", dataset)
    if not prior.exists():
        cli("train-prior", "--dataset", dataset, "--out", prior,
            "--steps", args.prior_steps, "--seed", 11,
            "--loss-csv", out / "prior_loss.csv")

    run_dirs = []
    for mode in args.modes:
        needs_prior = mode not in ("vanilla_ppo", "bc_warmstart")
        for seed in args.seeds:
            run_dir = out / f"{args.env}_{mode}_seed{seed}"
            run_dirs.append(run_dir)
            if (run_dir / "summary.json").exists():
                print(f"= {run_dir} already done, skipping", flush=True)
                continue
            extra = ["--prior", prior] if needs_prior else []
            if mode == "bc_warmstart":
                extra = ["--dataset", dataset]
            cli("train-online", "--env", args.env, "--mode", mode,
                "--seed", seed, "--run-dir", run_dir,
                "--set", f"online_budget={args.budget}", *extra)

    cli("report", "--out", out / "report", *run_dirs)
    print(f"\nreport written to {out / 'report'}")


if __name__ == "__main__":
    main()
