"""diffppo: strictly on-policy PPO accelerated by a value-guided diffusion
action prior with parameter-efficient online adaptation."""

__version__ = "0.1.0"
