"""Diffusion action prior: denoising-loss training on logged data and
ancestral reverse-process sampling with an optional guidance hook.

All training and sampling happens in normalized (state, action) coordinates;
`sample`/`sample_batch` take raw states and return raw, bound-clipped actions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SamplerDiverged
from .nn import DiffusionPrior, NoiseSchedule

ACTION_BOUND = 1.0


@dataclass
class PriorTrainConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    pet_lr: float = 1e-5
    holdout_frac: float = 0.1
    eval_every: int = 50


def build_prior_from_dataset(dataset, rng, hidden=(128, 128, 128), rank=8,
                             schedule=None):
    """Construct a prior sized for the dataset's env, with normalization
    stats and sigma_data taken from the (normalized) logged actions."""
    if len(dataset) == 0:
        raise ConfigError("cannot build a prior from an empty dataset")
    stats = dataset.stats
    norm_actions = stats.norm_action(dataset.actions)
    sigma_data = float(np.maximum(norm_actions.std(), 1e-3))
    return DiffusionPrior(
        dataset.states.shape[1], dataset.actions.shape[1], rng,
        hidden=hidden, rank=rank,
        schedule=schedule if schedule is not None else NoiseSchedule(),
        sigma_data=sigma_data, norm=stats,
    )


def denoising_loss(prior, norm_states, norm_actions, sigmas, noise, adapters_only=False):
    """EDM-weighted denoising MSE as an autodiff scalar."""
    noisy = norm_actions + noise
    target = Tensor(norm_actions)
    pred = prior.denoise(Tensor(noisy), norm_states, sigmas)
    sd = prior.sigma_data
    weight = (sigmas**2 + sd**2) / (sigmas * sd) ** 2  # (N,1)
    sq = ad.vsum(ad.square(ad.sub(pred, target)), axis=1)  # (N,)
    return ad.vmean(ad.mul(sq, weight[:, 0]))


def _draw_sigmas(prior, n, rng):
    lo, hi = prior.schedule.sigma_min, prior.schedule.sigma_max
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 1)))


def train_prior_step(prior, states, actions, rng, opt, stats=None, adapters_only=False):
    """One denoising-objective step. `states`/`actions` are raw (the dataset
    stats attached to the prior do the normalization); `opt` owns either all
    parameters (logged stage) or only the adapters (online PET stage)."""
    if stats is not None and prior.norm is not None:
        if stats.fingerprint() != prior.norm.fingerprint():
            raise ConfigError("dataset normalization stats do not match the prior's")
    ns = prior.norm.norm_state(states) if prior.norm else np.asarray(states, dtype=np.float64)
    na = prior.norm.norm_action(actions) if prior.norm else np.asarray(actions, dtype=np.float64)
    sigmas = _draw_sigmas(prior, len(ns), rng)
    noise = sigmas * rng.standard_normal(na.shape)
    opt.zero_grad()
    loss = denoising_loss(prior, ns, na, sigmas, noise, adapters_only=adapters_only)
    loss.backward()
    opt.step()
    return float(loss.value)


def evaluate_denoising_loss(prior, states, actions, seed=0):
    """Denoising loss under a fixed noise draw (for held-out monitoring)."""
    rng = np.random.default_rng(seed)
    ns = prior.norm.norm_state(states) if prior.norm else states
    na = prior.norm.norm_action(actions) if prior.norm else actions
    sigmas = _draw_sigmas(prior, len(ns), rng)
    noise = sigmas * rng.standard_normal(na.shape)
    return float(denoising_loss(prior, ns, na, sigmas, noise).value)


def train_prior(prior, dataset, config, rng):
    """Full-backbone training on the logged dataset.

    Returns a history of (step, train_loss, holdout_loss) rows.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train a prior on an empty dataset")
    n = len(dataset)
    n_hold = max(1, int(config.holdout_frac * n)) if n > 10 else 0
    perm = rng.permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]
    # backbone only: the adapters stay a zero-initialised identity until the
    # online stage, which owns them exclusively
    opt = ad.Adam(prior.backbone_params(), lr=config.lr)
    history = []
    for step in range(1, config.steps + 1):
        idx = rng.choice(train, size=min(config.batch_size, len(train)), replace=False)
        loss = train_prior_step(
            prior, dataset.states[idx], dataset.actions[idx], rng, opt, stats=dataset.stats
        )
        if step % config.eval_every == 0 or step == config.steps:
            hold_loss = (
                evaluate_denoising_loss(prior, dataset.states[hold], dataset.actions[hold])
                if n_hold > 0 else float("nan")
            )
            history.append((step, loss, hold_loss))
    return history


def sample_batch(prior, states, k, rng, guidance=None):
    """K candidates per state: (n, K, action_dim), raw actions clipped to
    bounds. Deterministic given the rng's seed/state."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states.reshape(1, -1)
    n = states.shape[0]
    flat_states = np.repeat(states, k, axis=0)
    actions = _sample_flat(prior, flat_states, rng, guidance)
    return actions.reshape(n, k, prior.action_dim)


def sample(prior, state, rng, guidance=None):
    """One action for one state."""
    return sample_batch(prior, np.asarray(state).reshape(1, -1), 1, rng, guidance)[0, 0]


def _sample_flat(prior, raw_states, rng, guidance):
    norm_states = prior.norm.norm_state(raw_states) if prior.norm else raw_states
    for attempt in range(2):
        a = _run_chain(prior, norm_states, raw_states, rng, guidance)
        if np.all(np.isfinite(a)):
            raw = prior.norm.denorm_action(a) if prior.norm else a
            return np.clip(raw, -ACTION_BOUND, ACTION_BOUND)
    raise SamplerDiverged("non-finite sample after one resample attempt")


def _run_chain(prior, norm_states, raw_states, rng, guidance):
    sched = prior.schedule
    ladder = sched.ladder
    m, da = norm_states.shape[0], prior.action_dim
    a = sched.sigma_max * rng.standard_normal((m, da))
    action_std = prior.norm.action_std if prior.norm else 1.0
    for i, s in enumerate(ladder):
        if not np.all(np.isfinite(a)):
            return a
        d = prior.denoise_np(a, norm_states, s)
        s_next = ladder[i + 1] if i + 1 < len(ladder) else 0.0
        r = s_next**2 / s**2
        mean = d + r * (a - d)
        std = s_next * np.sqrt(1.0 - r)
        a_new = mean + std * rng.standard_normal((m, da))
        if guidance is not None:
            raw_a = prior.norm.denorm_action(a) if prior.norm else a
            g = guidance(raw_states, raw_a, s, sched.sigma_max)
            a_new = a_new + g / action_std
        a = a_new
    return a
