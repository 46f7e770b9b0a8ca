"""Metrics and statistics: area under the learning curve, exact paired
Wilcoxon signed-rank, Spearman rank correlation, and run-log schemas."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientData, ShapeError


# ---------------------------------------------------------------------------
# learning curves


@dataclass
class LearningCurve:
    steps: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if np.any(np.diff(self.steps) <= 0):
            raise ConfigError("curve steps must be strictly increasing")


def alc_at_t(curve, horizon):
    """Time-normalized trapezoidal area of the curve on [t0, min(T, t_last)],
    with linear interpolation at T when the curve extends past it."""
    steps, rets = curve.steps, curve.returns
    if (steps <= horizon).sum() < 2:
        raise InsufficientData("need at least 2 evaluation points within the horizon")
    if steps[-1] > horizon:
        r_at_t = float(np.interp(horizon, steps, rets))
        mask = steps < horizon
        steps = np.append(steps[mask], horizon)
        rets = np.append(rets[mask], r_at_t)
    area = getattr(np, "trapezoid", np.trapz)(rets, steps)
    return float(area / (steps[-1] - steps[0]))


# ---------------------------------------------------------------------------
# paired Wilcoxon signed-rank, exact two-sided


def wilcoxon_paired(x, y):
    """(W_plus, p). Exact distribution via convolution over signed mid-ranks
    (equivalent to enumerating all sign assignments); zero differences are
    dropped; ties get average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("wilcoxon_paired needs equal-length 1-D samples")
    if len(x) < 3:
        raise InsufficientData("need n >= 3 pairs")
    d = x - y
    d = d[d != 0.0]
    if len(d) == 0:
        return 0.0, 1.0
    ranks = _midranks(np.abs(d))
    # doubling makes average ranks integral for the exact convolution
    r2 = np.rint(2 * ranks).astype(int)
    w_plus2 = int(r2[d > 0].sum())
    total = int(r2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    dist /= dist.sum()
    p_low = dist[: w_plus2 + 1].sum()
    p_high = dist[w_plus2:].sum()
    p = min(1.0, 2.0 * min(p_low, p_high))
    return w_plus2 / 2.0, float(p)


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Spearman rank correlation


@dataclass
class SpearmanResult:
    rho: float
    degenerate: bool = False


def spearman_rho(x, y):
    """Pearson correlation of mid-ranks. Constant input -> rho 0 with the
    degenerate flag set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ShapeError("spearman_rho needs equal-length 1-D samples, n >= 2")
    rx, ry = _midranks(x), _midranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return SpearmanResult(0.0, degenerate=True)
    rho = float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))
    return SpearmanResult(rho)


# ---------------------------------------------------------------------------
# run logs

RUNLOG_COLUMNS = [
    "iteration",
    "env_steps",
    "mean_episode_return",
    "actor_loss",
    "ppo_loss",
    "v_loss",
    "q_loss",
    "prior_kl_loss",
    "aux_loss",
    "k_policy",
    "k_prior",
    "beta",
    "alpha_max",
    "pet_steps",
    "dsyn_size",
    "mean_q_guided",
    "mean_q_unguided",
    "accept_fraction",
    "q_spearman",
    "epochs_used",
    "wall_clock_s",
]


class RunLogWriter:
    """Append-only CSV, one row per iteration, fixed column order."""

    def __init__(self, path):
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=RUNLOG_COLUMNS)
        self._writer.writeheader()

    def append(self, row):
        self._writer.writerow({k: row.get(k, "") for k in RUNLOG_COLUMNS})
        self._file.flush()

    def close(self):
        self._file.close()


def read_runlog(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = {}
    for col in RUNLOG_COLUMNS:
        vals = []
        for r in rows:
            v = r.get(col, "")
            vals.append(float(v) if v not in ("", None) else np.nan)
        out[col] = np.array(vals)
    return out


def write_curve(path, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mean_return", "n_episodes"])
        for step, ret, n in points:
            w.writerow([step, ret, n])


def read_curve(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    steps = np.array([float(r["step"]) for r in rows])
    rets = np.array([float(r["mean_return"]) for r in rows])
    return LearningCurve(steps, rets)


def student_t_ci(values, confidence=0.95):
    """(mean, halfwidth) of a Student-t CI; degenerates to (x, 0) at n=1."""
    from scipy import stats

    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return mean, 0.0
    sem = values.std(ddof=1) / np.sqrt(n)
    t = stats.t.ppf(0.5 + confidence / 2.0, df=n - 1)
    return mean, float(t * sem)
