"""Command-line driver for the two-stage protocol.

Commands: make-dataset, train-prior, train-online, report.
Exit codes: 0 success, 1 configuration error, 2 runtime divergence.
The DIFFPPO_RUN_ROOT environment variable overrides the default run root.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import MODES, ExperimentConfig
from .datasets import export_csv, generate_logged_dataset, load_dataset, save_dataset
from .errors import ConfigError, DiffPPOError, DomainError, MonitorError, SamplerDiverged
from .evalstats import write_curve  # noqa: F401  (re-exported for scripts)
from .nn import load_checkpoint, save_checkpoint
from .prior import PriorTrainConfig, build_prior_from_dataset, train_prior


def run_root():
    return os.environ.get("DIFFPPO_RUN_ROOT", "runs")


def _add_config_args(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def _resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for name in ("env", "mode", "seed"):
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None:
            overrides[name] = str(val)
    return cfg.with_overrides(overrides)


def cmd_make_dataset(args):
    if args.n <= 0:
        raise ConfigError("need a positive number of transitions")
    ds = generate_logged_dataset(args.env, args.behavior, args.n, args.seed)
    save_dataset(ds, args.out)
    if args.csv:
        export_csv(ds, args.csv)
    rets = ds.episode_returns()
    print(f"wrote {args.out}: {len(ds)} transitions from '{args.behavior}' on {args.env}")
    if len(rets):
        print(f"episode return: mean {rets.mean():.3f}, min {rets.min():.3f}, max {rets.max():.3f}")
    return 0


def cmd_train_prior(args):
    ds = load_dataset(args.dataset)
    if len(ds) == 0:
        raise ConfigError("cannot train a prior on an empty dataset")
    rng = np.random.default_rng(args.seed)
    prior = build_prior_from_dataset(ds, rng, rank=args.rank)
    cfg = PriorTrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr)
    history = train_prior(prior, ds, cfg, rng)
    save_checkpoint(args.out, prior, meta={"dataset": os.path.basename(args.dataset),
                                           "train_seed": args.seed})
    if args.loss_csv:
        with open(args.loss_csv, "w") as f:
            f.write("step,train_loss,holdout_loss\n")
            for step, tr, ho in history:
                f.write(f"{step},{tr},{ho}\n")
    print(f"wrote {args.out}: held-out loss {history[0][2]:.4f} -> {history[-1][2]:.4f}")
    return 0


def cmd_train_online(args):
    from .trainer import run_online

    cfg = _resolve_config(args).resolve()
    if cfg.online_budget <= 0:
        raise ConfigError("online_budget must be > 0")
    prior = None
    if cfg.use_prior:
        if not args.prior:
            raise ConfigError(f"mode '{cfg.mode}' requires --prior CHECKPOINT")
        prior, _ = load_checkpoint(args.prior)
    dataset = load_dataset(args.dataset) if args.dataset else None
    run_dir = args.run_dir or os.path.join(run_root(), f"{cfg.env}_{cfg.mode}_seed{cfg.seed}")
    summary = run_online(cfg, run_dir, prior=prior, dataset=dataset)
    print(f"run complete: {run_dir} ({summary['iterations']} iterations, "
          f"final eval return {summary['final_eval_return']:.3f})")
    return 0


def cmd_report(args):
    from .report import build_report

    report = build_report(args.run_dirs, args.out)
    print(f"wrote report to {args.out} ({len(report['arms'])} arms)")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="diffppo")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a logged dataset")
    p.add_argument("--env", default="pointmass")
    p.add_argument("--behavior", default="pd", choices=["random", "pd", "expert"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export records as CSV")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-prior", help="train the diffusion action prior on logged data")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-online", help="run the on-policy fine-tuning stage")
    _add_config_args(p)
    p.add_argument("--env")
    p.add_argument("--mode", choices=list(MODES))
    p.add_argument("--seed", type=int)
    p.add_argument("--prior", help="prior checkpoint (required unless vanilla/bc mode)")
    p.add_argument("--dataset", help="logged dataset (required for BC warm-start)")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train_online)

    p = sub.add_parser("report", help="aggregate completed run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SamplerDiverged, MonitorError) as e:
        print(f"runtime divergence: {e}", file=sys.stderr)
        return 2
    except DiffPPOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
