"""Network definitions: actor-critic with shared trunk, conditional denoiser
with low-rank adapters and EDM-style preconditioning, diagonal-Gaussian proxy
head, and checkpoint I/O.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, MonitorError, ShapeError

LOGSTD_MIN = -5.0
LOGSTD_MAX = 2.0
SIGMA_EMBED_DIM = 16
PROXY_LOGSTD_FLOOR = 0.5 * np.log(1e-4)  # variance floor 1e-4
LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, n_in, n_out, rng, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(n_in)
        self.w = Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True, name="w")
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name="b")

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def forward_np(self, x):
        return x @ self.w.value + self.b.value

    def params(self):
        return [self.w, self.b]


class LoRALinear:
    """Linear layer with a low-rank adapter path: y = xW + b + (xA)B.

    B is zero-initialised, so a fresh adapter is an exact identity on the
    base layer's output. Online training touches only A and B.
    """

    def __init__(self, n_in, n_out, rank, rng):
        s = 1.0 / np.sqrt(n_in)
        self.w = Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True, name="w")
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name="b")
        self.a = Tensor(rng.normal(0.0, s, size=(n_in, rank)), requires_grad=True, name="lora_a")
        self.bb = Tensor(np.zeros((rank, n_out)), requires_grad=True, name="lora_b")

    def __call__(self, x, with_adapters=True):
        out = ad.add(ad.matmul(x, self.w), self.b)
        if with_adapters:
            out = ad.add(out, ad.matmul(ad.matmul(x, self.a), self.bb))
        return out

    def forward_np(self, x, with_adapters=True):
        out = x @ self.w.value + self.b.value
        if with_adapters:
            out = out + (x @ self.a.value) @ self.bb.value
        return out

    def base_params(self):
        return [self.w, self.b]

    def adapter_params(self):
        return [self.a, self.bb]


class MLP:
    def __init__(self, sizes, rng, activation="tanh"):
        self.layers = [Linear(sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)]
        self.activation = activation

    def _act(self, x):
        return ad.tanh(x) if self.activation == "tanh" else ad.silu(x)

    def _act_np(self, x):
        if self.activation == "tanh":
            return np.tanh(x)
        return x / (1.0 + np.exp(-x))

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = self._act(layer(x))
        return self.layers[-1](x)

    def forward_np(self, x):
        for layer in self.layers[:-1]:
            x = self._act_np(layer.forward_np(x))
        return self.layers[-1].forward_np(x)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


# ---------------------------------------------------------------------------
# Gaussian densities


def gaussian_log_prob(mean, logstd, action):
    """Diagonal-Gaussian log density, summed over the last axis.

    Accepts Tensors (differentiable) or arrays. Batched inputs (N, d)
    return per-row log-probs of shape (N,).
    """
    if isinstance(mean, Tensor) or isinstance(logstd, Tensor) or isinstance(action, Tensor):
        mean, logstd, action = ad.as_tensor(mean), ad.as_tensor(logstd), ad.as_tensor(action)
        z = ad.mul(ad.sub(action, mean), ad.exp(ad.mul(logstd, -1.0)))
        per_dim = ad.mul(ad.add(ad.add(ad.square(z), ad.mul(logstd, 2.0)), LOG_2PI), -0.5)
        return ad.vsum(per_dim, axis=per_dim.value.ndim - 1)
    mean, logstd, action = (np.asarray(v, dtype=np.float64) for v in (mean, logstd, action))
    z = (action - mean) * np.exp(-logstd)
    return (-0.5 * (z**2 + 2.0 * logstd + LOG_2PI)).sum(axis=-1)


def gaussian_kl(mean1, var1, mean0, var0):
    """Closed-form KL(N1 || N0) for diagonal Gaussians, summed over the last
    axis. Plain-array path; see `gaussian_kl_loss` for the differentiable one.
    """
    mean1, var1, mean0, var0 = (np.asarray(v, dtype=np.float64) for v in (mean1, var1, mean0, var0))
    if np.any(var1 <= 0) or np.any(var0 <= 0):
        raise DomainError("gaussian_kl requires positive variances")
    term = var1 / var0 + (mean0 - mean1) ** 2 / var0 - 1.0 + np.log(var0 / var1)
    return 0.5 * term.sum(axis=-1)


def gaussian_kl_loss(mean1, logstd1, mean0, var0):
    """Differentiable per-row KL(N1 || N0); N0 is a constant (numpy)."""
    mean0 = np.asarray(mean0, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    if np.any(var0 <= 0):
        raise DomainError("gaussian_kl_loss requires positive reference variance")
    var1 = ad.exp(ad.mul(logstd1, 2.0))
    ratio = ad.mul(var1, 1.0 / var0)
    shift = ad.mul(ad.square(ad.sub(Tensor(mean0), mean1)), 1.0 / var0)
    logdet = ad.sub(Tensor(np.log(var0)), ad.mul(logstd1, 2.0))
    per_dim = ad.add(ad.add(ratio, shift), ad.sub(logdet, 1.0))
    return ad.mul(ad.vsum(per_dim, axis=per_dim.value.ndim - 1), 0.5)


# ---------------------------------------------------------------------------
# actor-critic


class ActorCritic:
    """Diagonal-Gaussian policy, V head, and a lightweight Q head over a
    shared tanh trunk."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.trunk = MLP([state_dim, *hidden], rng, activation="tanh")
        h = hidden[-1]
        self.mean_head = Linear(h, action_dim, rng, scale=0.01)
        self.logstd_head = Linear(h, action_dim, rng, scale=0.01)
        self.v_head = Linear(h, 1, rng)
        self.q_hidden = Linear(h + action_dim, 64, rng)
        self.q_out = Linear(64, 1, rng)

    def _trunk_t(self, states):
        x = ad.as_tensor(states)
        for layer in self.trunk.layers[:-1]:
            x = ad.tanh(layer(x))
        return ad.tanh(self.trunk.layers[-1](x))

    def _trunk_np(self, states):
        x = np.asarray(states, dtype=np.float64)
        for layer in self.trunk.layers:
            x = np.tanh(layer.forward_np(x))
        return x

    def policy(self, states):
        h = self._trunk_t(states)
        mean = self.mean_head(h)
        logstd = ad.clip(self.logstd_head(h), LOGSTD_MIN, LOGSTD_MAX)
        return mean, logstd

    def policy_np(self, states):
        h = self._trunk_np(states)
        mean = self.mean_head.forward_np(h)
        logstd = np.clip(self.logstd_head.forward_np(h), LOGSTD_MIN, LOGSTD_MAX)
        return mean, logstd

    def value(self, states):
        return self.v_head(self._trunk_t(states))

    def value_np(self, states):
        return self.v_head.forward_np(self._trunk_np(states))[..., 0]

    def q_value(self, states, actions):
        h = self._trunk_t(states)
        a = ad.as_tensor(actions)
        z = ad.tanh(self.q_hidden(ad.concat([h, a], axis=1)))
        return self.q_out(z)

    def q_value_np(self, states, actions):
        h = self._trunk_np(states)
        z = np.tanh(self.q_hidden.forward_np(np.concatenate([h, actions], axis=1)))
        return self.q_out.forward_np(z)[..., 0]

    def q_grad_wrt_action(self, states, actions):
        """d sum(Q)/d a, evaluated rowwise; used by in-process guidance."""
        a = Tensor(actions, requires_grad=True, name="a_guided")
        q = self.q_value(np.asarray(states, dtype=np.float64), a)
        ad.vsum(q).backward()
        return a.grad.copy()

    def act(self, state, rng):
        s = np.asarray(state, dtype=np.float64).reshape(1, -1)
        mean, logstd = self.policy_np(s)
        std = np.exp(logstd)
        action = mean + std * rng.standard_normal(mean.shape)
        logp = float(gaussian_log_prob(mean, logstd, action)[0])
        return action[0], logp, float(self.value_np(s)[0])

    def act_deterministic(self, state):
        s = np.asarray(state, dtype=np.float64).reshape(1, -1)
        return self.policy_np(s)[0][0]

    def params(self):
        return (
            self.trunk.params()
            + self.mean_head.params()
            + self.logstd_head.params()
            + self.v_head.params()
            + self.q_hidden.params()
            + self.q_out.params()
        )

    def state_dict(self):
        return {f"p{i}": p.value.copy() for i, p in enumerate(self.params())}

    def load_state_dict(self, d):
        for i, p in enumerate(self.params()):
            arr = np.asarray(d[f"p{i}"], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError("checkpoint/parameter shape mismatch")
            p.value = arr.copy()


# ---------------------------------------------------------------------------
# diffusion prior


class NoiseSchedule:
    def __init__(self, sigma_min=0.01, sigma_max=2.0, n_steps=20):
        if sigma_min <= 0 or sigma_max <= sigma_min:
            raise DomainError("need 0 < sigma_min < sigma_max")
        if n_steps < 1:
            raise DomainError("n_steps >= 1")
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.n_steps = int(n_steps)

    @property
    def ladder(self):
        if self.n_steps == 1:
            return np.array([self.sigma_max])
        return np.geomspace(self.sigma_max, self.sigma_min, self.n_steps)


def sigma_embedding(sigma):
    """16-dim sinusoidal embedding of ln(sigma); sigma shape (N, 1)."""
    log_s = np.log(np.asarray(sigma, dtype=np.float64)).reshape(-1, 1)
    freqs = np.geomspace(0.25, 8.0, SIGMA_EMBED_DIM // 2)
    return np.concatenate([np.sin(log_s * freqs), np.cos(log_s * freqs)], axis=1)


class GaussianProxyHead:
    """Diagonal-Gaussian proxy over the prior's conditional action law;
    used only for the soft prior-KL and the drift monitor."""

    def __init__(self, state_dim, action_dim, rng):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.trunk = Linear(state_dim, 64, rng)
        self.mu_head = Linear(64, action_dim, rng)
        self.logstd_head = Linear(64, action_dim, rng)
        self.fitted = False

    def forward(self, states):
        # logstd passes through a sigmoid squash rather than a hard clip so
        # the NLL gradient never vanishes at the bounds.
        h = ad.tanh(self.trunk(ad.as_tensor(states)))
        mu = self.mu_head(h)
        span = LOGSTD_MAX - PROXY_LOGSTD_FLOOR
        logstd = ad.add(ad.mul(ad.sigmoid(self.logstd_head(h)), span), PROXY_LOGSTD_FLOOR)
        return mu, logstd

    def predict_np(self, states):
        h = np.tanh(self.trunk.forward_np(np.asarray(states, dtype=np.float64)))
        mu = self.mu_head.forward_np(h)
        span = LOGSTD_MAX - PROXY_LOGSTD_FLOOR
        raw = self.logstd_head.forward_np(h)
        logstd = PROXY_LOGSTD_FLOOR + span / (1.0 + np.exp(-raw))
        return mu, np.exp(2.0 * logstd)

    def params(self):
        return self.trunk.params() + self.mu_head.params() + self.logstd_head.params()


class DiffusionPrior:
    """Conditional denoiser with EDM preconditioning and LoRA adapters.

    Trains in normalized (state, action) space; `norm` carries the dataset
    statistics it was trained against.
    """

    def __init__(self, state_dim, action_dim, rng=None, hidden=(128, 128, 128),
                 rank=8, schedule=None, sigma_data=1.0, norm=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.rank = int(rank)
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self.sigma_data = float(sigma_data)
        self.norm = norm  # NormStats or None
        in_dim = action_dim + state_dim + SIGMA_EMBED_DIM
        sizes = [in_dim, *hidden, action_dim]
        self.layers = [LoRALinear(sizes[i], sizes[i + 1], rank, rng) for i in range(len(sizes) - 1)]
        self.proxy = GaussianProxyHead(state_dim, action_dim, rng)

    # parameter groups
    def backbone_params(self):
        return [p for layer in self.layers for p in layer.base_params()]

    def adapter_params(self):
        return [p for layer in self.layers for p in layer.adapter_params()]

    def params(self):
        return self.backbone_params() + self.adapter_params()

    def _coeffs(self, sigma):
        sd2 = self.sigma_data**2
        s2 = sigma**2
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(s2 + sd2)
        c_in = 1.0 / np.sqrt(s2 + sd2)
        return c_skip, c_out, c_in

    def _check_sigma(self, sigma):
        lo, hi = self.schedule.sigma_min, self.schedule.sigma_max
        if np.any(sigma < lo * (1 - 1e-12)) or np.any(sigma > hi * (1 + 1e-12)):
            raise DomainError(f"sigma outside [{lo}, {hi}]")

    def denoise(self, noisy_action, state, sigma, with_adapters=True):
        """Differentiable preconditioned denoiser; sigma is (N,1) or scalar."""
        noisy_action = ad.as_tensor(noisy_action)
        n = noisy_action.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), (n, 1))
        self._check_sigma(sigma)
        c_skip, c_out, c_in = self._coeffs(sigma)
        x = ad.concat(
            [
                ad.mul(noisy_action, Tensor(c_in)),
                ad.as_tensor(np.asarray(state, dtype=np.float64)),
                Tensor(sigma_embedding(sigma)),
            ],
            axis=1,
        )
        for layer in self.layers[:-1]:
            x = ad.silu(layer(x, with_adapters))
        raw = self.layers[-1](x, with_adapters)
        return ad.add(ad.mul(noisy_action, Tensor(c_skip)), ad.mul(raw, Tensor(c_out)))

    def denoise_np(self, noisy_action, state, sigma, with_adapters=True):
        noisy_action = np.asarray(noisy_action, dtype=np.float64)
        n = noisy_action.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), (n, 1))
        self._check_sigma(sigma)
        c_skip, c_out, c_in = self._coeffs(sigma)
        x = np.concatenate(
            [c_in * noisy_action, np.asarray(state, dtype=np.float64), sigma_embedding(sigma)],
            axis=1,
        )
        for layer in self.layers[:-1]:
            z = layer.forward_np(x, with_adapters)
            x = z / (1.0 + np.exp(-z))
        raw = self.layers[-1].forward_np(x, with_adapters)
        return c_skip * noisy_action + c_out * raw

    def state_dict(self):
        d = {}
        for i, layer in enumerate(self.layers):
            d[f"layer{i}.w"] = layer.w.value.copy()
            d[f"layer{i}.b"] = layer.b.value.copy()
            d[f"layer{i}.a"] = layer.a.value.copy()
            d[f"layer{i}.bb"] = layer.bb.value.copy()
        for i, p in enumerate(self.proxy.params()):
            d[f"proxy{i}"] = p.value.copy()
        return d

    def load_state_dict(self, d):
        for i, layer in enumerate(self.layers):
            layer.w.value = np.asarray(d[f"layer{i}.w"], dtype=np.float64).copy()
            layer.b.value = np.asarray(d[f"layer{i}.b"], dtype=np.float64).copy()
            layer.a.value = np.asarray(d[f"layer{i}.a"], dtype=np.float64).copy()
            layer.bb.value = np.asarray(d[f"layer{i}.bb"], dtype=np.float64).copy()
        for i, p in enumerate(self.proxy.params()):
            p.value = np.asarray(d[f"proxy{i}"], dtype=np.float64).copy()

    def clone(self):
        other = DiffusionPrior(
            self.state_dim, self.action_dim, np.random.default_rng(0),
            hidden=self.hidden, rank=self.rank,
            schedule=NoiseSchedule(self.schedule.sigma_min, self.schedule.sigma_max, self.schedule.n_steps),
            sigma_data=self.sigma_data, norm=self.norm,
        )
        other.load_state_dict(self.state_dict())
        other.proxy.fitted = self.proxy.fitted
        return other


def denoiser_forward(prior, noisy_action, state, sigma, with_adapters=True):
    """Preconditioned denoiser output as a plain array."""
    return prior.denoise_np(noisy_action, state, sigma, with_adapters=with_adapters)


def proxy_fit(prior, states, rng, m_samples=64, steps=50, lr=3e-2, sampler=None):
    """Fit the diagonal-Gaussian proxy head by NLL on actions drawn from the
    diffusion sampler at each state. Deterministic given `rng` state: the head
    is re-initialised from a child seed before fitting.

    Returns the final fit loss.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ShapeError("proxy_fit needs a non-empty (n, state_dim) array")
    seed = int(rng.integers(0, 2**63 - 1))
    init_rng = np.random.default_rng(seed)
    prior.proxy = GaussianProxyHead(prior.state_dim, prior.action_dim, init_rng)
    if sampler is None:
        from .prior import sample_batch  # deferred: prior.py imports nn

        samples = sample_batch(prior, states, m_samples, np.random.default_rng(seed + 1))
    else:
        samples = sampler(states, m_samples, np.random.default_rng(seed + 1))
    n, m, da = samples.shape
    flat_states = np.repeat(states, m, axis=0)
    flat_actions = samples.reshape(n * m, da)
    opt = ad.Adam(prior.proxy.params(), lr=lr)
    loss_val = np.inf
    for _ in range(steps):
        opt.zero_grad()
        mu, logstd = prior.proxy.forward(flat_states)
        loss = ad.mul(ad.vmean(gaussian_log_prob(mu, logstd, flat_actions)), -1.0)
        loss.backward()
        opt.step()
        loss_val = float(loss.value)
    prior.proxy.fitted = True
    return loss_val


def proxy_kl(prior_after, prior_before, states):
    """Mean closed-form KL between the two priors' fitted proxy heads."""
    if not (prior_after.proxy.fitted and prior_before.proxy.fitted):
        raise MonitorError("proxy heads must be fitted before computing the monitor")
    mu1, var1 = prior_after.proxy.predict_np(states)
    mu0, var0 = prior_before.proxy.predict_np(states)
    return float(np.mean(gaussian_kl(mu1, var1, mu0, var0)))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def params_hash(state_dict):
    h = hashlib.sha256()
    for k in sorted(state_dict):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state_dict[k]).tobytes())
    return h.hexdigest()


def prior_weights_hash(prior):
    """Hash of the denoiser weights only (backbone + adapters). The proxy
    monitor head is a refit diagnostic and deliberately excluded."""
    return params_hash({f"p{i}": p.value for i, p in enumerate(prior.params())})


def save_checkpoint(path, obj, meta=None):
    """Write a versioned parameter dump that round-trips bit-exactly."""
    meta = dict(meta or {})
    meta["version"] = CHECKPOINT_VERSION
    if isinstance(obj, ActorCritic):
        meta["kind"] = "actor_critic"
        meta["state_dim"] = obj.state_dim
        meta["action_dim"] = obj.action_dim
        meta["hidden"] = list(obj.hidden)
    elif isinstance(obj, DiffusionPrior):
        meta["kind"] = "diffusion_prior"
        meta["state_dim"] = obj.state_dim
        meta["action_dim"] = obj.action_dim
        meta["hidden"] = list(obj.hidden)
        meta["rank"] = obj.rank
        meta["sigma_data"] = obj.sigma_data
        meta["schedule"] = [obj.schedule.sigma_min, obj.schedule.sigma_max, obj.schedule.n_steps]
        if obj.norm is not None:
            meta["norm"] = {k: v.tolist() for k, v in obj.norm.as_dict().items()}
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(obj)}")
    state = obj.state_dict()
    meta["params_hash"] = params_hash(state)
    arrays = dict(state)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    ).copy()
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns (object, meta)."""
    from .datasets import NormStats  # deferred import

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        state = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version: {meta.get('version')}")
    if meta["kind"] == "actor_critic":
        obj = ActorCritic(meta["state_dim"], meta["action_dim"], hidden=tuple(meta["hidden"]))
        obj.load_state_dict(state)
    elif meta["kind"] == "diffusion_prior":
        sched = NoiseSchedule(*meta["schedule"][:2], int(meta["schedule"][2]))
        norm = NormStats.from_dict(meta["norm"]) if "norm" in meta else None
        obj = DiffusionPrior(
            meta["state_dim"], meta["action_dim"], hidden=tuple(meta["hidden"]),
            rank=meta["rank"], schedule=sched, sigma_data=meta["sigma_data"], norm=norm,
        )
        obj.load_state_dict(state)
    else:
        raise ConfigError(f"unknown checkpoint kind: {meta['kind']}")
    if params_hash(obj.state_dict()) != meta["params_hash"]:
        raise ConfigError("checkpoint hash mismatch after load")
    return obj, meta
