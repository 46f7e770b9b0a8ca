"""Desk-scale continuous-control environments.

Two MDPs with bounded actions in [-1, 1]^d:

* PointMass: 2-D double integrator driven toward a fixed goal,
  r = -||pos - goal|| - 0.01 ||a||^2.
* Pendulum: torque-limited swing-up, r = -(angle^2 + 0.1 vel^2 + 0.001 a^2),
  angle wrapped to (-pi, pi] with 0 = upright.

Both are deterministic given (state, action); stochasticity enters only
through seeded resets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float
    r_max: float  # |r| bound used by sanity checks


class PointMassEnv:
    spec = EnvSpec("pointmass", state_dim=4, action_dim=2, horizon=60, gamma=0.99, r_max=4.0)
    dt = 0.1
    goal = np.array([0.6, 0.4])
    pos_lim = 2.0
    vel_lim = 2.0

    def __init__(self):
        self.state = np.zeros(4)
        self.t = 0

    def reset(self, rng):
        pos = rng.uniform(-1.0, 1.0, size=2)
        self.state = np.concatenate([pos, np.zeros(2)])
        self.t = 0
        return self.state.copy()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        pos, vel = self.state[:2], self.state[2:]
        reward = -np.linalg.norm(pos - self.goal) - 0.01 * float(a @ a)
        new_pos = np.clip(pos + vel * self.dt + 0.5 * a * self.dt**2, -self.pos_lim, self.pos_lim)
        new_vel = np.clip(vel + a * self.dt, -self.vel_lim, self.vel_lim)
        self.state = np.concatenate([new_pos, new_vel])
        self.t += 1
        return self.state.copy(), float(reward), self.t >= self.spec.horizon


class PendulumEnv:
    spec = EnvSpec("pendulum", state_dim=2, action_dim=1, horizon=100, gamma=0.99, r_max=17.0)
    dt = 0.05
    max_torque = 2.0
    max_speed = 8.0
    g, m, length = 10.0, 1.0, 1.0

    def __init__(self):
        self.state = np.zeros(2)
        self.t = 0

    def reset(self, rng):
        self.state = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
        self.t = 0
        return self.state.copy()

    def step(self, action):
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        theta, vel = self.state
        reward = -(theta**2 + 0.1 * vel**2 + 0.001 * a**2)
        torque = self.max_torque * a
        acc = 1.5 * self.g / self.length * np.sin(theta) + 3.0 / (self.m * self.length**2) * torque
        new_vel = np.clip(vel + acc * self.dt, -self.max_speed, self.max_speed)
        new_theta = _wrap_angle(theta + new_vel * self.dt)
        self.state = np.array([new_theta, new_vel])
        self.t += 1
        return self.state.copy(), float(reward), self.t >= self.spec.horizon


def _wrap_angle(x):
    return (x + np.pi) % (2.0 * np.pi) - np.pi


_ENVS = {"pointmass": PointMassEnv, "pendulum": PendulumEnv}


def make_env(name):
    try:
        return _ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown environment '{name}' (have: {sorted(_ENVS)})") from None


def env_spec(name):
    return make_env(name).spec


# ---------------------------------------------------------------------------
# behavior policies for dataset generation


def behavior_policy(env_name, kind):
    """Returns policy(state, rng) -> (action, logp)."""
    spec = env_spec(env_name)
    d = spec.action_dim
    log_uniform = -d * np.log(2.0)

    if kind == "random":
        def policy(state, rng):
            return rng.uniform(-1.0, 1.0, size=d), log_uniform
        return policy

    if kind not in ("pd", "expert"):
        raise ConfigError(f"unknown behavior policy '{kind}' (random|pd|expert)")

    noise = 0.3 if kind == "pd" else 0.1
    if env_name == "pointmass":
        kp, kd = (1.0, 0.8) if kind == "pd" else (2.0, 1.6)

        def policy(state, rng):
            mean = kp * (PointMassEnv.goal - state[:2]) - kd * state[2:]
            a = mean + noise * rng.standard_normal(d)
            logp = float(-0.5 * (((a - mean) / noise) ** 2 + 2 * np.log(noise) + np.log(2 * np.pi)).sum())
            return np.clip(a, -1.0, 1.0), logp
        return policy

    k1, k2 = (0.8, 0.3) if kind == "pd" else (2.0, 0.6)

    def policy(state, rng):
        mean = np.array([-k1 * state[0] - k2 * state[1]])
        a = mean + noise * rng.standard_normal(d)
        logp = float(-0.5 * (((a - mean) / noise) ** 2 + 2 * np.log(noise) + np.log(2 * np.pi)).sum())
        return np.clip(a, -1.0, 1.0), logp
    return policy
