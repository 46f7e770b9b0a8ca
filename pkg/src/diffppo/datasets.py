"""Logged datasets: generation, normalization stats, and the on-disk format.

File layout (little-endian):

    bytes 0..6    magic b"DPLOG1\\n"
    bytes 7..14   uint64 header length H
    next H bytes  UTF-8 JSON header (sorted keys): env, state_dim, action_dim,
                  count, seed, behavior, norm stats
    then          count records of float64 fields:
                  s[state_dim], a[action_dim], r, s_next[state_dim], done, logp
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .envs import behavior_policy, make_env
from .errors import ConfigError

MAGIC = b"DPLOG1\n"


@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @staticmethod
    def from_data(states, actions):
        return NormStats(
            state_mean=states.mean(axis=0),
            state_std=np.maximum(states.std(axis=0), 1e-8),
            action_mean=actions.mean(axis=0),
            action_std=np.maximum(actions.std(axis=0), 1e-8),
        )

    def norm_state(self, s):
        return (s - self.state_mean) / self.state_std

    def norm_action(self, a):
        return (a - self.action_mean) / self.action_std

    def denorm_action(self, a):
        return a * self.action_std + self.action_mean

    def as_dict(self):
        return {
            "state_mean": self.state_mean,
            "state_std": self.state_std,
            "action_mean": self.action_mean,
            "action_std": self.action_std,
        }

    @staticmethod
    def from_dict(d):
        return NormStats(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def fingerprint(self):
        vals = np.concatenate([v.ravel() for v in self.as_dict().values()])
        return hash(vals.tobytes())


@dataclass
class LoggedDataset:
    env_name: str
    behavior: str
    seed: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    logps: np.ndarray
    stats: NormStats

    def __len__(self):
        return self.states.shape[0]

    def episode_returns(self):
        returns, acc = [], 0.0
        for r, d in zip(self.rewards, self.dones):
            acc += r
            if d:
                returns.append(acc)
                acc = 0.0
        return np.array(returns)


def generate_logged_dataset(env_name, behavior, n_transitions, seed):
    """Roll the behavior policy until exactly n_transitions are collected.
    Reproducible: the same seed yields a byte-identical file."""
    if n_transitions < 0:
        raise ConfigError("n_transitions must be >= 0")
    env = make_env(env_name)
    policy = behavior_policy(env_name, behavior)
    rng = np.random.default_rng(seed)
    ds, da = env.spec.state_dim, env.spec.action_dim
    S = np.empty((n_transitions, ds))
    A = np.empty((n_transitions, da))
    R = np.empty(n_transitions)
    S2 = np.empty((n_transitions, ds))
    D = np.empty(n_transitions)
    LP = np.empty(n_transitions)
    i = 0
    while i < n_transitions:
        s = env.reset(rng)
        done = False
        while not done and i < n_transitions:
            a, logp = policy(s, rng)
            s2, r, done = env.step(a)
            S[i], A[i], R[i], S2[i], D[i], LP[i] = s, a, r, s2, float(done), logp
            s = s2
            i += 1
    if n_transitions > 0:
        stats = NormStats.from_data(S, A)
    else:
        stats = NormStats(np.zeros(ds), np.ones(ds), np.zeros(da), np.ones(da))
    return LoggedDataset(env_name, behavior, seed, S, A, R, S2, D, LP, stats)


def save_dataset(dataset, path):
    header = {
        "env": dataset.env_name,
        "behavior": dataset.behavior,
        "seed": dataset.seed,
        "count": len(dataset),
        "state_dim": dataset.states.shape[1],
        "action_dim": dataset.actions.shape[1],
        "norm": {k: v.tolist() for k, v in dataset.stats.as_dict().items()},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    records = np.concatenate(
        [
            dataset.states,
            dataset.actions,
            dataset.rewards[:, None],
            dataset.next_states,
            dataset.dones[:, None],
            dataset.logps[:, None],
        ],
        axis=1,
    ).astype("<f8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        f.write(records.tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a DPLOG1 dataset file")
        (hlen,) = np.frombuffer(f.read(8), dtype="<u8")
        header = json.loads(f.read(int(hlen)).decode())
        raw = np.frombuffer(f.read(), dtype="<f8")
    ds, da, n = header["state_dim"], header["action_dim"], header["count"]
    width = 2 * ds + da + 3
    if raw.size != n * width:
        raise ConfigError(f"{path}: truncated record block")
    rec = raw.reshape(n, width)
    o = 0
    states = rec[:, o:o + ds]; o += ds
    actions = rec[:, o:o + da]; o += da
    rewards = rec[:, o]; o += 1
    next_states = rec[:, o:o + ds]; o += ds
    dones = rec[:, o]; o += 1
    logps = rec[:, o]
    return LoggedDataset(
        header["env"], header["behavior"], header["seed"],
        states.copy(), actions.copy(), rewards.copy(), next_states.copy(),
        dones.copy(), logps.copy(), NormStats.from_dict(header["norm"]),
    )


def export_csv(dataset, path):
    ds, da = dataset.states.shape[1], dataset.actions.shape[1]
    cols = (
        [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + ["r"]
        + [f"s_next{i}" for i in range(ds)] + ["done", "logp"]
    )
    table = np.concatenate(
        [
            dataset.states, dataset.actions, dataset.rewards[:, None],
            dataset.next_states, dataset.dones[:, None], dataset.logps[:, None],
        ],
        axis=1,
    )
    np.savetxt(path, table, delimiter=",", header=",".join(cols), comments="")
