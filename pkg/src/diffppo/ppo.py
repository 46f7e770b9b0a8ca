"""On-policy PPO pieces: GAE, clipped surrogate, TD critic losses, and the
full actor objective (surrogate + soft prior-KL + auxiliary imitation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .nn import gaussian_kl_loss, gaussian_log_prob

DSYN_SHARE_CAP = 0.2


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    batch_size: int = 256
    epochs: int = 10
    lr: float = 3e-4
    value_coef: float = 0.5
    kl_target: float = 0.02  # soft monitor, not a constraint

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")


@dataclass
class RolloutBatch:
    """One iteration's on-policy experience. PPO consumes nothing else."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    old_logps: np.ndarray
    bootstrap_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    source: str = "d_on"
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]

    def finalize(self, gamma, lam):
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, gamma, lam, self.bootstrap_value
        )
        std = self.advantages.std()
        self.advantages = (self.advantages - self.advantages.mean()) / max(std, 1e-8)


def compute_gae(rewards, values, dones, gamma, lam, bootstrap_value=0.0):
    """delta_t = r_t + gamma*V(s_{t+1})*(1-done_t) - V(s_t);
    A_t = sum_k (gamma*lam)^k delta_{t+k}, truncated at episode ends."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ShapeError("rewards/values/dones must be aligned 1-D arrays")
    T = rewards.shape[0]
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        next_v = bootstrap_value if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def ppo_clip_loss(new_logp, old_logp, advantages, clip_eps):
    """Negated clipped surrogate: -mean(min(r*A, clip(r, 1-eps, 1+eps)*A))."""
    adv = np.asarray(advantages, dtype=np.float64)
    ratio = ad.exp(ad.sub(new_logp, np.asarray(old_logp, dtype=np.float64)))
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    return ad.mul(ad.vmean(ad.minimum(unclipped, clipped)), -1.0)


def critic_losses(batch, nets, gamma):
    """(v_loss, q_loss): V regresses to GAE returns; the Q head regresses to
    one-step TD targets with the V target detached."""
    v_pred = nets.value(batch.states)
    v_loss = ad.vmean(ad.square(ad.sub(v_pred, batch.returns.reshape(-1, 1))))
    next_v = nets.value_np(_next_states(batch))
    q_target = batch.rewards + gamma * next_v * (1.0 - batch.dones)
    q_pred = nets.q_value(batch.states, batch.actions)
    q_loss = ad.vmean(ad.square(ad.sub(q_pred, q_target.reshape(-1, 1))))
    return v_loss, q_loss


def _next_states(batch):
    if getattr(batch, "next_states", None) is not None:
        return batch.next_states
    raise ShapeError("batch lacks next_states")


def actor_objective(batch, dsyn, nets, prior, lam_kl, lam_aux, clip_eps, counters=None,
                    parts=None):
    """L_actor = L_PPO(D_on) + lam_kl * KL(pi || prior proxy) + lam_aux *
    E_dsyn[-log pi(a|s)]. The surrogate only ever sees the on-policy batch."""
    if dsyn is not None and len(dsyn.states) > DSYN_SHARE_CAP * len(batch):
        raise ConfigError(
            f"D_syn share {len(dsyn.states)}/{len(batch)} exceeds cap {DSYN_SHARE_CAP}"
        )
    if counters is not None:
        counters[f"ppo_samples_{batch.source}"] = counters.get(f"ppo_samples_{batch.source}", 0) + len(batch)
    mean, logstd = nets.policy(batch.states)
    new_logp = gaussian_log_prob(mean, logstd, batch.actions)
    loss = ppo_clip_loss(new_logp, batch.old_logps, batch.advantages, clip_eps)
    if parts is not None:
        parts["ppo"] = float(loss.value)
        parts["prior_kl"] = 0.0
        parts["aux"] = 0.0
    if lam_kl > 0.0:
        mu0, var0 = prior.proxy.predict_np(batch.states)
        kl_term = ad.vmean(gaussian_kl_loss(mean, logstd, mu0, var0))
        if parts is not None:
            parts["prior_kl"] = float(kl_term.value)
        loss = ad.add(loss, ad.mul(kl_term, lam_kl))
    if lam_aux > 0.0 and dsyn is not None and len(dsyn.states) > 0:
        mean_s, logstd_s = nets.policy(dsyn.states)
        aux = ad.mul(ad.vmean(gaussian_log_prob(mean_s, logstd_s, dsyn.actions)), -1.0)
        if parts is not None:
            parts["aux"] = float(aux.value)
        loss = ad.add(loss, ad.mul(aux, lam_aux))
        if counters is not None:
            counters["aux_samples_d_syn"] = counters.get("aux_samples_d_syn", 0) + len(dsyn.states)
    return loss


def policy_kl(nets_new, old_mean, old_logstd, states):
    """Closed-form mean KL(pi_new || pi_old) over the iteration's states."""
    from .nn import gaussian_kl

    mean, logstd = nets_new.policy_np(states)
    return float(np.mean(gaussian_kl(mean, np.exp(2 * logstd), old_mean, np.exp(2 * old_logstd))))
