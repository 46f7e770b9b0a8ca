"""Parameter-efficient online adaptation of the prior (adapter-only updates)
and the prior-drift KL monitor."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .nn import proxy_kl
from .prior import train_prior_step

ALLOWED_RATES = (0, 5, 10, 20)


@dataclass
class PetConfig:
    rate: int = 10  # PET steps per 100 PPO actor updates
    rank: int = 8
    lr: float = 1e-5
    batch_size: int = 64

    def __post_init__(self):
        if self.rate not in ALLOWED_RATES:
            raise ConfigError(f"PET rate must be one of {ALLOWED_RATES}, got {self.rate}")


def should_pet_step(actor_update_index, rate):
    """True iff a PET step fires at this 1-based actor-update index; exactly
    `rate` firings per 100 indices."""
    if rate not in ALLOWED_RATES:
        raise ConfigError(f"PET rate must be one of {ALLOWED_RATES}, got {rate}")
    if rate == 0:
        return False
    spacing = round(100 / rate)
    return actor_update_index % spacing == 0


def pet_step(prior, states, actions, rng, opt):
    """One adapter-only denoising step on recent on-policy pairs. `opt` must
    own exactly the adapter parameters. Returns ||delta psi_PET||_2; the
    backbone is untouched by construction (verified cheaply here)."""
    if len(states) == 0:
        warnings.warn("pet_step skipped: empty batch", RuntimeWarning)
        return 0.0
    adapter_params = prior.adapter_params()
    assert all(o is p for o, p in zip(opt.params, adapter_params)), \
        "PET optimizer must own the adapter parameters"
    before = [p.value.copy() for p in adapter_params]
    backbone_ref = [p.value for p in prior.backbone_params()]
    train_prior_step(prior, states, actions, rng, opt, adapters_only=True)
    for p, ref in zip(prior.backbone_params(), backbone_ref):
        p.grad = None
        if p.value is not ref:
            raise AssertionError("backbone parameter replaced during PET step")
    delta = np.sqrt(sum(float(((p.value - b) ** 2).sum()) for p, b in zip(adapter_params, before)))
    return float(delta)


def prior_kl_monitor(prior_before, prior_after, states):
    """Mean closed-form Gaussian KL(after || before) between the fitted proxy
    heads over the iteration's on-policy states."""
    return proxy_kl(prior_after, prior_before, np.asarray(states, dtype=np.float64))


def make_pet_optimizer(prior, lr, max_grad_norm=1.0):
    return ad.Adam(prior.adapter_params(), lr=lr, max_grad_norm=max_grad_norm)
