"""Experiment configuration: a flat dataclass, mode toggles, and a
key=value file format (flags override file values; file + flags fully
determine a run)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

MODES = (
    "vanilla_ppo",
    "bc_warmstart",
    "full",
    "no_vg",
    "no_pet",
    "prior_kl_only",
    "aux_bc_only",
    "diffusion_no_vg",
)


@dataclass
class ExperimentConfig:
    env: str = "pointmass"
    mode: str = "full"
    seed: int = 1
    online_budget: int = 100_000

    # PPO
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    batch_size: int = 256
    epochs: int = 10
    actor_lr: float = 3e-4
    value_coef: float = 0.5
    kl_target: float = 0.02

    # auxiliary terms
    lam_kl: float = 5e-3
    lam_aux: float = 1e-2
    use_prior: bool = True
    bc_epochs: int = 0

    # value guidance
    beta_final: float = 1.0
    beta_anneal_fraction: float = 0.3
    alpha_max: float = 0.30
    grad_cap: float = 0.1
    proposals_per_state: int = 10
    n_proposal_states: int = 16
    draws_per_state: int = 3
    dsyn_mode: str = "resample"
    topk: int = 2
    passes_per_iteration: int = 1

    # PET
    pet_rate: int = 10
    lora_rank: int = 8
    pet_lr: float = 1e-5
    pet_batch: int = 64

    # monitors
    monitor_states: int = 8
    proxy_samples: int = 64
    proxy_steps: int = 50

    # evaluation
    eval_fraction: float = 0.02
    eval_episodes: int = 10

    def resolve(self):
        """Materialize mode toggles into explicit fields."""
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}' (have: {MODES})")
        cfg = replace(self)
        if cfg.mode in ("vanilla_ppo", "bc_warmstart"):
            cfg = replace(cfg, lam_kl=0.0, lam_aux=0.0, beta_final=0.0,
                          alpha_max=0.0, pet_rate=0, use_prior=False)
            if cfg.mode == "bc_warmstart" and cfg.bc_epochs == 0:
                cfg = replace(cfg, bc_epochs=20)
        elif cfg.mode in ("no_vg", "diffusion_no_vg"):
            cfg = replace(cfg, beta_final=0.0, alpha_max=0.0)
        elif cfg.mode == "no_pet":
            cfg = replace(cfg, pet_rate=0)
        elif cfg.mode == "prior_kl_only":
            cfg = replace(cfg, lam_aux=0.0)
        elif cfg.mode == "aux_bc_only":
            cfg = replace(cfg, lam_kl=0.0)
        return cfg

    def to_text(self):
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @staticmethod
    def from_text(text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
        return ExperimentConfig().with_overrides(values)

    @staticmethod
    def load(path):
        with open(path) as f:
            return ExperimentConfig.from_text(f.read())

    def with_overrides(self, overrides):
        """Apply string-valued overrides with type coercion from defaults."""
        kwargs = {}
        type_map = {f.name: f.type for f in fields(self)}
        for key, val in overrides.items():
            if key not in type_map:
                raise ConfigError(f"unknown config key '{key}'")
            current = getattr(self, key)
            if isinstance(current, bool):
                kwargs[key] = str(val).strip().lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(val)
            elif isinstance(current, float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = str(val).strip()
        return replace(self, **kwargs)

    def diff(self, other):
        """Field names whose values differ (used to audit mode toggles)."""
        return sorted(
            f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)
        )
