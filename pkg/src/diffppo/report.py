"""Aggregation across completed runs: per-arm summaries with Student-t CIs,
paired Wilcoxon significance against the vanilla PPO arm, learning-curve
plots, and dual-KL box summaries."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .evalstats import alc_at_t, read_curve, read_runlog, student_t_ci, wilcoxon_paired

ALC_HORIZON_FRACTION = 0.4
FINAL_RETURN_TAIL = 0.1


@dataclass
class RunRecord:
    run_dir: str
    mode: str
    seed: int
    budget: int
    curve: object
    runlog: dict
    summary: dict

    @property
    def final_return(self):
        n = max(1, int(np.ceil(FINAL_RETURN_TAIL * len(self.curve.returns))))
        return float(self.curve.returns[-n:].mean())

    @property
    def alc(self):
        return alc_at_t(self.curve, ALC_HORIZON_FRACTION * self.budget)


def load_run(run_dir):
    cfg = ExperimentConfig.load(os.path.join(run_dir, "config.txt"))
    curve = read_curve(os.path.join(run_dir, "curve.csv"))
    runlog = read_runlog(os.path.join(run_dir, "runlog.csv"))
    with open(os.path.join(run_dir, "summary.json")) as f:
        summary = json.load(f)
    return RunRecord(run_dir, cfg.mode, cfg.seed, cfg.online_budget, curve, runlog, summary)


def build_report(run_dirs, out_dir, baseline_mode="vanilla_ppo"):
    os.makedirs(out_dir, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ConfigError("no runs to report on")
    arms = {}
    for r in runs:
        arms.setdefault(r.mode, []).append(r)
    for mode in arms:
        arms[mode].sort(key=lambda r: r.seed)

    report = {"arms": {}, "pairwise_vs_baseline": {}, "overhead": {}}
    for mode, rs in arms.items():
        finals = np.array([r.final_return for r in rs])
        alcs = np.array([r.alc for r in rs])
        kp = np.concatenate([r.runlog["k_policy"] for r in rs])
        kpri = np.concatenate([r.runlog["k_prior"] for r in rs])
        wall = [r.summary.get("wall_clock_per_10k_steps") for r in rs]
        fin_mean, fin_hw = student_t_ci(finals)
        alc_mean, alc_hw = student_t_ci(alcs)
        if len(rs) == 1:
            warnings.warn(f"arm '{mode}': single run, CI degenerates to the point estimate")
        report["arms"][mode] = {
            "seeds": [r.seed for r in rs],
            "final_return_mean": fin_mean,
            "final_return_ci95": fin_hw,
            "alc_mean": alc_mean,
            "alc_ci95": alc_hw,
            "k_policy_median": float(np.nanmedian(kp)) if len(kp) else None,
            "k_prior_median": float(np.nanmedian(kpri)) if len(kpri) else None,
            "k_policy_quartiles": _quartiles(kp),
            "k_prior_quartiles": _quartiles(kpri),
            "wall_clock_per_10k_steps": float(np.mean([w for w in wall if w])) if any(wall) else None,
        }

    base = arms.get(baseline_mode)
    if base is not None:
        base_seeds = [r.seed for r in base]
        for mode, rs in arms.items():
            if mode == baseline_mode:
                continue
            seeds = [r.seed for r in rs]
            if seeds != base_seeds or len(seeds) < 3:
                report["pairwise_vs_baseline"][mode] = {
                    "paired": False,
                    "note": "seed sets do not match the baseline (or n < 3); unpaired summary only",
                }
                continue
            for metric, getter in (("final_return", lambda r: r.final_return),
                                   ("alc", lambda r: r.alc)):
                x = np.array([getter(r) for r in rs])
                y = np.array([getter(r) for r in base])
                stat, p = wilcoxon_paired(x, y)
                report["pairwise_vs_baseline"].setdefault(mode, {"paired": True})[metric] = {
                    "arm_mean": float(x.mean()),
                    "baseline_mean": float(y.mean()),
                    "w_plus": stat,
                    "p_two_sided": p,
                }

    base_wall = report["arms"].get(baseline_mode, {}).get("wall_clock_per_10k_steps")
    for mode, info in report["arms"].items():
        w = info["wall_clock_per_10k_steps"]
        if base_wall and w:
            report["overhead"][mode] = {
                "wall_clock_per_10k_steps": w,
                "relative_to_baseline": w / base_wall,
            }

    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    _write_text_report(report, os.path.join(out_dir, "report.txt"))
    _plot_curves(arms, os.path.join(out_dir, "learning_curves.svg"))
    _plot_kl_boxes(arms, os.path.join(out_dir, "dual_kl_box.svg"))
    return report


def _quartiles(x):
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return None
    return [float(np.percentile(x, q)) for q in (25, 50, 75)]


def _write_text_report(report, path):
    lines = ["arm summaries", "============="]
    for mode, info in sorted(report["arms"].items()):
        lines.append(
            f"{mode}: final {info['final_return_mean']:.3f} +/- {info['final_return_ci95']:.3f}, "
            f"ALC {info['alc_mean']:.3f} +/- {info['alc_ci95']:.3f}, "
            f"median K_policy {info['k_policy_median']}, median K_prior {info['k_prior_median']}"
        )
    if report["pairwise_vs_baseline"]:
        lines += ["", "paired Wilcoxon vs baseline", "==========================="]
        for mode, info in sorted(report["pairwise_vs_baseline"].items()):
            if not info.get("paired"):
                lines.append(f"{mode}: {info['note']}")
                continue
            for metric in ("final_return", "alc"):
                m = info[metric]
                lines.append(
                    f"{mode} [{metric}]: {m['arm_mean']:.3f} vs {m['baseline_mean']:.3f}, "
                    f"W+={m['w_plus']}, p={m['p_two_sided']:.4f}"
                )
    if report["overhead"]:
        lines += ["", "wall-clock per 10k env steps", "============================"]
        for mode, info in sorted(report["overhead"].items()):
            lines.append(
                f"{mode}: {info['wall_clock_per_10k_steps']:.2f}s "
                f"({info['relative_to_baseline']:.2f}x baseline)"
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _plot_curves(arms, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mode, rs in sorted(arms.items()):
        steps = rs[0].curve.steps
        mat = np.stack([np.interp(steps, r.curve.steps, r.curve.returns) for r in rs])
        mean = mat.mean(axis=0)
        (line,) = ax.plot(steps, mean, label=mode)
        if len(rs) > 1:
            from scipy import stats

            sem = mat.std(axis=0, ddof=1) / np.sqrt(len(rs))
            hw = stats.t.ppf(0.975, df=len(rs) - 1) * sem
            ax.fill_between(steps, mean - hw, mean + hw, alpha=0.2, color=line.get_color())
    ax.set_xlabel("environment steps")
    ax.set_ylabel("eval return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_kl_boxes(arms, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, data = [], []
    for mode, rs in sorted(arms.items()):
        kp = np.concatenate([r.runlog["k_policy"] for r in rs])
        kp = kp[np.isfinite(kp) & (kp > 0)]
        kpri = np.concatenate([r.runlog["k_prior"] for r in rs])
        kpri = kpri[np.isfinite(kpri) & (kpri > 0)]
        if len(kp):
            labels.append(f"{mode}\nK_policy")
            data.append(kp)
        if len(kpri):
            labels.append(f"{mode}\nK_prior")
            data.append(kpri)
    if not data:
        return
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(data)), 4.5))
    ax.boxplot(data, tick_labels=labels, whis=(5, 95))
    ax.set_yscale("log")
    ax.set_ylabel("per-iteration KL")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
