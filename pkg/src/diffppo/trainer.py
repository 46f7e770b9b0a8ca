"""The online training loop: rollout collection, value-guided proposals,
actor/critic updates, PET scheduling, dual-KL monitors, evaluation, and the
run-directory artifacts."""

from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .envs import make_env
from .errors import ConfigError, MonitorError
from .evalstats import RunLogWriter, spearman_rho, write_curve
from .guidance import GuidanceConfig, beta_at, build_dsyn, propose
from .nn import ActorCritic, prior_weights_hash, proxy_fit, save_checkpoint
from .pet import make_pet_optimizer, pet_step, prior_kl_monitor, should_pet_step
from .ppo import RolloutBatch, actor_objective, critic_losses, policy_kl


def build_id():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class OnlineTrainer:
    def __init__(self, config, run_dir, prior=None, dataset=None):
        self.cfg = config.resolve()
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        if self.cfg.use_prior and prior is None:
            raise ConfigError(f"mode '{self.cfg.mode}' requires a prior checkpoint")
        if self.cfg.bc_epochs > 0 and dataset is None:
            raise ConfigError("BC warm-start requires a logged dataset")
        self.prior = prior
        self.dataset = dataset
        self.env = make_env(self.cfg.env)
        spec = self.env.spec
        if prior is not None and (prior.state_dim, prior.action_dim) != (spec.state_dim, spec.action_dim):
            raise ConfigError("prior checkpoint dimensions do not match the environment")

        ss = np.random.SeedSequence(self.cfg.seed)
        kids = ss.spawn(6)
        self.init_rng = np.random.default_rng(kids[0])
        self.rollout_rng = np.random.default_rng(kids[1])
        self.proposal_rng = np.random.default_rng(kids[2])
        self.proxy_rng = np.random.default_rng(kids[3])
        self.pet_rng = np.random.default_rng(kids[4])
        self.bc_rng = np.random.default_rng(kids[5])

        self.nets = ActorCritic(spec.state_dim, spec.action_dim, rng=self.init_rng)
        self.opt = ad.Adam(self.nets.params(), lr=self.cfg.actor_lr, max_grad_norm=None)
        self.pet_opt = make_pet_optimizer(prior, self.cfg.pet_lr) if prior is not None else None
        self.counters = {}
        self.curve_points = []
        self.actor_update_index = 0
        self.guidance_cfg = GuidanceConfig(
            beta_final=self.cfg.beta_final,
            beta_anneal_fraction=self.cfg.beta_anneal_fraction,
            alpha_max=self.cfg.alpha_max,
            grad_cap=self.cfg.grad_cap,
            proposals_per_state=self.cfg.proposals_per_state,
            n_proposal_states=self.cfg.n_proposal_states,
            draws_per_state=self.cfg.draws_per_state,
            dsyn_mode=self.cfg.dsyn_mode,
            topk=self.cfg.topk,
            passes_per_iteration=self.cfg.passes_per_iteration,
        )
        self._env_state = None

    # ------------------------------------------------------------------ io

    def _write_prelude(self):
        self.cfg.save(os.path.join(self.run_dir, "config.txt"))
        with open(os.path.join(self.run_dir, "meta.json"), "w") as f:
            json.dump(
                {
                    "build_id": build_id(),
                    "config_hash": self.cfg.config_hash(),
                    "prior_hash_initial": prior_weights_hash(self.prior) if self.prior else None,
                },
                f,
                indent=2,
            )

    # ------------------------------------------------------------- rollout

    def collect(self, n_steps):
        spec = self.env.spec
        S = np.empty((n_steps, spec.state_dim))
        A = np.empty((n_steps, spec.action_dim))
        R = np.empty(n_steps)
        D = np.empty(n_steps)
        V = np.empty(n_steps)
        LP = np.empty(n_steps)
        S2 = np.empty((n_steps, spec.state_dim))
        ep_returns, ep_acc = [], 0.0
        s = self._env_state
        if s is None:
            s = self.env.reset(self.rollout_rng)
        for t in range(n_steps):
            a, logp, v = self.nets.act(s, self.rollout_rng)
            s2, r, done = self.env.step(a)
            S[t], A[t], R[t], D[t], V[t], LP[t], S2[t] = s, a, r, float(done), v, logp, s2
            ep_acc += r
            if done:
                ep_returns.append(ep_acc)
                ep_acc = 0.0
                s = self.env.reset(self.rollout_rng)
            else:
                s = s2
        self._env_state = s
        bootstrap = 0.0 if D[-1] else float(self.nets.value_np(s.reshape(1, -1))[0])
        batch = RolloutBatch(S, A, R, D, V, LP, bootstrap_value=bootstrap,
                             episode_returns=ep_returns)
        batch.next_states = S2
        return batch

    # ---------------------------------------------------------------- eval

    def evaluate(self, eval_idx):
        env = make_env(self.cfg.env)
        rng = np.random.default_rng([self.cfg.seed, 777, eval_idx])
        rets = []
        for _ in range(self.cfg.eval_episodes):
            s = env.reset(rng)
            done, acc = False, 0.0
            while not done:
                s, r, done = env.step(self.nets.act_deterministic(s))
                acc += r
            rets.append(acc)
        return float(np.mean(rets))

    # ------------------------------------------------------------ warm-up

    def bc_warmstart(self):
        ds = self.dataset
        opt = ad.Adam(self.nets.params(), lr=1e-3)
        n = len(ds)
        for _ in range(self.cfg.bc_epochs):
            idx = self.bc_rng.permutation(n)
            for start in range(0, n, 256):
                b = idx[start : start + 256]
                opt.zero_grad()
                mean, _ = self.nets.policy(ds.states[b])
                loss = ad.vmean(ad.square(ad.sub(mean, ds.actions[b])))
                loss.backward()
                opt.step()

    # ------------------------------------------------------------ the loop

    def run(self):
        cfg = self.cfg
        self._write_prelude()
        runlog = RunLogWriter(os.path.join(self.run_dir, "runlog.csv"))
        if cfg.bc_epochs > 0:
            self.bc_warmstart()

        eval_interval = max(1, int(cfg.eval_fraction * cfg.online_budget))
        eval_idx = 0
        self.curve_points.append((0, self.evaluate(eval_idx), cfg.eval_episodes))
        eval_idx += 1
        next_eval = eval_interval

        steps_done = 0
        iteration = 0
        epochs_this_iter = cfg.epochs
        total_wall = 0.0
        try:
            while steps_done < cfg.online_budget:
                iteration += 1
                t0 = time.perf_counter()
                batch = self.collect(cfg.batch_size)
                batch.finalize(cfg.gamma, cfg.gae_lambda)
                steps_done += cfg.batch_size
                progress = min(steps_done / cfg.online_budget, 1.0)
                old_mean, old_logstd = self.nets.policy_np(batch.states)

                # Q quality on the fresh (not yet trained-on) batch
                q_pred = self.nets.q_value_np(batch.states, batch.actions)
                td = batch.rewards + cfg.gamma * self.nets.value_np(batch.next_states) * (1 - batch.dones)
                q_sp = spearman_rho(q_pred, td).rho

                dsyn, prop_stats = None, {}
                beta = beta_at(progress, cfg.beta_final, cfg.beta_anneal_fraction) if cfg.use_prior else 0.0
                if cfg.use_prior and cfg.lam_aux > 0.0:
                    dsyn, prop_stats = self._propose(batch, beta)

                monitor_states = None
                snapshot_before = None
                proxy_seed = None
                if cfg.use_prior:
                    pick = self.proxy_rng.choice(len(batch), size=min(cfg.monitor_states, len(batch)), replace=False)
                    monitor_states = batch.states[pick]
                    proxy_seed = int(self.proxy_rng.integers(0, 2**31 - 1))
                    proxy_fit(self.prior, monitor_states, np.random.default_rng(proxy_seed),
                              m_samples=cfg.proxy_samples, steps=cfg.proxy_steps)
                    snapshot_before = self.prior.clone()

                losses, pet_count = self._update(batch, dsyn, epochs_this_iter)

                k_policy = policy_kl(self.nets, old_mean, old_logstd, batch.states)
                epochs_next = max(1, epochs_this_iter // 2) if k_policy > cfg.kl_target else cfg.epochs

                k_prior = 0.0
                if cfg.use_prior and pet_count > 0:
                    proxy_fit(self.prior, monitor_states, np.random.default_rng(proxy_seed),
                              m_samples=cfg.proxy_samples, steps=cfg.proxy_steps)
                    k_prior = prior_kl_monitor(snapshot_before, self.prior, monitor_states)
                if not np.isfinite(k_policy) or not np.isfinite(k_prior):
                    raise MonitorError(
                        f"KL monitor non-finite at iteration {iteration}: "
                        f"k_policy={k_policy}, k_prior={k_prior}"
                    )

                while steps_done >= next_eval:
                    self.curve_points.append((min(next_eval, cfg.online_budget),
                                              self.evaluate(eval_idx), cfg.eval_episodes))
                    eval_idx += 1
                    next_eval += eval_interval

                wall = time.perf_counter() - t0
                total_wall += wall
                runlog.append({
                    "iteration": iteration,
                    "env_steps": steps_done,
                    "mean_episode_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else "",
                    "actor_loss": losses["actor"],
                    "ppo_loss": losses["ppo"],
                    "v_loss": losses["v"],
                    "q_loss": losses["q"],
                    "prior_kl_loss": losses["prior_kl"],
                    "aux_loss": losses["aux"],
                    "k_policy": k_policy,
                    "k_prior": k_prior,
                    "beta": beta,
                    "alpha_max": cfg.alpha_max,
                    "pet_steps": pet_count,
                    "dsyn_size": len(dsyn) if dsyn is not None else 0,
                    "mean_q_guided": prop_stats.get("mean_q_guided", ""),
                    "mean_q_unguided": prop_stats.get("mean_q_unguided", ""),
                    "accept_fraction": prop_stats.get("accept_fraction", ""),
                    "q_spearman": q_sp,
                    "epochs_used": epochs_this_iter,
                    "wall_clock_s": wall,
                })
                epochs_this_iter = epochs_next
        finally:
            runlog.close()

        write_curve(os.path.join(self.run_dir, "curve.csv"), self.curve_points)
        save_checkpoint(os.path.join(self.run_dir, "actor.npz"), self.nets,
                        meta={"config_hash": self.cfg.config_hash()})
        if self.prior is not None:
            save_checkpoint(os.path.join(self.run_dir, "prior.npz"), self.prior,
                            meta={"config_hash": self.cfg.config_hash()})
        summary = {
            "iterations": iteration,
            "env_steps": steps_done,
            "total_wall_clock_s": total_wall,
            "wall_clock_per_10k_steps": total_wall / steps_done * 1e4 if steps_done else None,
            "counters": self.counters,
            "prior_hash_final": prior_weights_hash(self.prior) if self.prior else None,
            "final_eval_return": self.curve_points[-1][1],
        }
        with open(os.path.join(self.run_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
        return summary

    # ------------------------------------------------------------ internals

    def _propose(self, batch, beta):
        cfg = self.cfg
        g = self.guidance_cfg
        dsyn_parts, total_cands = [], 0
        q_guided_all, q_unguided_all = [], []
        pick = self.proposal_rng.choice(len(batch), size=min(g.n_proposal_states, len(batch)), replace=False)
        states = batch.states[pick]
        for _ in range(g.passes_per_iteration):
            proposals = propose(self.prior, self.nets, states, self.proposal_rng, g, beta)
            q_guided_all.append(proposals.q_values.mean())
            if g.alpha_max == 0.0 and beta == 0.0:
                q_unguided_all.append(proposals.q_values.mean())
            else:
                unguided = propose(self.prior, self.nets, states, self.proposal_rng,
                                   replace(g, alpha_max=0.0), 0.0)
                q_unguided_all.append(unguided.q_values.mean())
            part = build_dsyn(proposals, g.dsyn_mode, 0.2, cfg.batch_size, self.proposal_rng,
                              draws_per_state=g.draws_per_state, topk=g.topk)
            dsyn_parts.append(part)
            total_cands += proposals.candidates.shape[0] * proposals.candidates.shape[1]
        states_cat = np.concatenate([p.states for p in dsyn_parts], axis=0)
        actions_cat = np.concatenate([p.actions for p in dsyn_parts], axis=0)
        cap = int(np.floor(0.2 * cfg.batch_size))
        if len(states_cat) > cap:
            states_cat, actions_cat = states_cat[:cap], actions_cat[:cap]
        from .guidance import DSyn

        dsyn = DSyn(states_cat, actions_cat)
        stats = {
            "mean_q_guided": float(np.mean(q_guided_all)),
            "mean_q_unguided": float(np.mean(q_unguided_all)),
            "accept_fraction": len(dsyn) / max(total_cands, 1),
        }
        return dsyn, stats

    def _update(self, batch, dsyn, epochs):
        cfg = self.cfg
        losses = {"actor": 0.0, "ppo": 0.0, "v": 0.0, "q": 0.0, "prior_kl": 0.0, "aux": 0.0}
        pet_count = 0
        for _ in range(epochs):
            self.actor_update_index += 1
            self.opt.zero_grad()
            parts = {}
            actor = actor_objective(batch, dsyn, self.nets, self.prior,
                                    cfg.lam_kl, cfg.lam_aux, cfg.clip_eps, self.counters,
                                    parts=parts)
            v_loss, q_loss = critic_losses(batch, self.nets, cfg.gamma)
            total = ad.add(actor, ad.mul(ad.add(v_loss, q_loss), cfg.value_coef))
            total.backward()
            self.opt.step()
            losses["actor"] = float(actor.value)
            losses["ppo"] = parts["ppo"]
            losses["prior_kl"] = parts["prior_kl"]
            losses["aux"] = parts["aux"]
            losses["v"] = float(v_loss.value)
            losses["q"] = float(q_loss.value)
            if cfg.use_prior and should_pet_step(self.actor_update_index, cfg.pet_rate):
                idx = self.pet_rng.choice(len(batch), size=min(cfg.pet_batch, len(batch)), replace=False)
                pet_step(self.prior, batch.states[idx], batch.actions[idx], self.pet_rng, self.pet_opt)
                pet_count += 1
        return losses, pet_count


def run_online(config, run_dir, prior=None, dataset=None):
    return OnlineTrainer(config, run_dir, prior=prior, dataset=dataset).run()
