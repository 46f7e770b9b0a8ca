"""Value-guided proposal generation: energy re-weighting of candidates,
in-process gradient guidance during denoising, and filtering into D_syn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .prior import sample_batch

BETA_FINAL = 1.0
BETA_ANNEAL_FRACTION = 0.3


@dataclass
class GuidanceConfig:
    beta_final: float = BETA_FINAL
    beta_anneal_fraction: float = BETA_ANNEAL_FRACTION
    alpha_max: float = 0.30
    grad_cap: float = 0.1
    proposals_per_state: int = 10  # K
    n_proposal_states: int = 16
    draws_per_state: int = 3  # resample-mode picks per state
    dsyn_mode: str = "resample"  # resample | topk
    topk: int = 2
    passes_per_iteration: int = 1

    def __post_init__(self):
        if self.beta_final < 0 or self.alpha_max < 0:
            raise ConfigError("beta and alpha_max must be >= 0")
        if self.grad_cap <= 0:
            raise ConfigError("grad_cap must be > 0")


@dataclass
class ProposalSet:
    """Per-state candidates with critic scores and normalized weights."""

    states: np.ndarray  # (n, ds)
    candidates: np.ndarray  # (n, K, da)
    q_values: np.ndarray  # (n, K)
    weights: np.ndarray  # (n, K), rows sum to 1
    beta: float = 0.0
    alpha_max: float = 0.0


@dataclass
class DSyn:
    states: np.ndarray
    actions: np.ndarray
    source: str = "d_syn"

    def __len__(self):
        return len(self.states)


def energy_weights(q_values, beta):
    """softmax(beta * q) with max-subtraction; rows are candidate sets."""
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    q = np.asarray(q_values, dtype=np.float64)
    z = beta * q
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def beta_at(progress, beta_final=BETA_FINAL, anneal_fraction=BETA_ANNEAL_FRACTION):
    """Linear anneal 0 -> beta_final over the first `anneal_fraction` of the
    online budget, then constant."""
    if not 0.0 <= progress <= 1.0:
        raise ConfigError("progress must lie in [0, 1]")
    return min(progress / anneal_fraction, 1.0) * beta_final


def guided_step_term(nets, states, actions, alpha_t, cap):
    """alpha_t * dQ/da, rescaled per row so ||term||_2 <= cap. Returns zeros
    (and reports it) when the critic gradient is non-finite."""
    if alpha_t == 0.0:
        return np.zeros_like(np.asarray(actions, dtype=np.float64))
    grad = nets.q_grad_wrt_action(np.asarray(states, dtype=np.float64),
                                  np.asarray(actions, dtype=np.float64))
    if not np.all(np.isfinite(grad)):
        return np.zeros_like(grad)
    g = alpha_t * grad
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
    return g * scale


def make_guidance_hook(nets, alpha_max, cap):
    """Adapts guided_step_term to the sampler's per-step callback:
    alpha_t = alpha_max * (1 - sigma_t / sigma_max)."""

    def hook(raw_states, raw_actions, sigma_t, sigma_max):
        alpha_t = alpha_max * (1.0 - sigma_t / sigma_max)
        return guided_step_term(nets, raw_states, raw_actions, alpha_t, cap)

    return hook


def propose(prior, nets, states, rng, config, beta):
    """Draw K candidates per state (gradient-guided if alpha_max > 0), score
    them with the online Q head, and attach energy weights."""
    states = np.asarray(states, dtype=np.float64)
    hook = (
        make_guidance_hook(nets, config.alpha_max, config.grad_cap)
        if config.alpha_max > 0.0 else None
    )
    cands = sample_batch(prior, states, config.proposals_per_state, rng, guidance=hook)
    n, k, da = cands.shape
    flat_states = np.repeat(states, k, axis=0)
    q = nets.q_value_np(flat_states, cands.reshape(n * k, da)).reshape(n, k)
    w = energy_weights(q, beta)
    return ProposalSet(states, cands, q, w, beta=beta, alpha_max=config.alpha_max)


def build_dsyn(proposals, mode, share_cap, batch_size, rng, draws_per_state=3, topk=2):
    """Select candidates into D_syn. `resample` draws with replacement by the
    energy weights; `topk` keeps the k highest-Q candidates per state (ties
    broken toward the lower candidate index). Output is truncated to
    share_cap * batch_size by descending weight."""
    if mode not in ("resample", "topk"):
        raise ConfigError(f"unknown dsyn mode '{mode}'")
    n, k, da = proposals.candidates.shape
    sel_states, sel_actions, sel_weights = [], [], []
    for i in range(n):
        if mode == "resample":
            idx = rng.choice(k, size=draws_per_state, replace=True, p=proposals.weights[i])
        else:
            # stable sort on -q keeps the lower index on ties
            idx = np.argsort(-proposals.q_values[i], kind="stable")[:topk]
        sel_states.append(np.repeat(proposals.states[i : i + 1], len(idx), axis=0))
        sel_actions.append(proposals.candidates[i, idx])
        sel_weights.append(proposals.weights[i, idx])
    states = np.concatenate(sel_states, axis=0)
    actions = np.concatenate(sel_actions, axis=0)
    weights = np.concatenate(sel_weights, axis=0)
    cap = int(np.floor(share_cap * batch_size))
    if len(states) > cap:
        order = np.argsort(-weights, kind="stable")[:cap]
        states, actions = states[order], actions[order]
    return DSyn(states, actions)
