"""Clipped-surrogate PPO actor-critic over the augmented (state, latent) input.

The actor is an MLP producing a diagonal-Gaussian action mean with a
state-independent log standard deviation; the critic is a separate MLP
producing a scalar value.  Rollouts record the pre-clip sample's log
probability; actions handed to the environment are clipped to its box.

Temporal-difference errors computed by :func:`advantages` double as the
change signal consumed by the detector gating the core branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Adam, DiffNode, ParamGroup, const, var

LOG_STD_BOUNDS = (-5.0, 2.0)


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_obs: int
    d_action: int
    action_low: float
    action_high: float
    hidden: int = 128
    gamma: float = 0.97
    gae_lambda: float = 0.95
    clip_ratio: float = 0.1
    epochs: int = 16
    minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 7e-4
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.d_obs < 1 or self.d_action < 1 or self.hidden < 1:
            raise PolicyError("dimensions must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise PolicyError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise PolicyError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.epochs < 1 or self.minibatch < 1:
            raise PolicyError("epochs and minibatch must be >= 1")


def init_policy_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParamGroup:
    def xavier(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    p = ParamGroup()
    p.add("pi.actor.w1", xavier(cfg.d_obs, cfg.hidden, (cfg.d_obs, cfg.hidden)))
    p.add("pi.actor.b1", np.zeros((1, cfg.hidden)))
    p.add("pi.actor.w2", xavier(cfg.hidden, cfg.d_action, (cfg.hidden, cfg.d_action)))
    p.add("pi.actor.b2", np.zeros((1, cfg.d_action)))
    p.add("pi.logstd", np.full((1, cfg.d_action), cfg.log_std_init))
    p.add("pi.critic.w1", xavier(cfg.d_obs, cfg.hidden, (cfg.d_obs, cfg.hidden)))
    p.add("pi.critic.b1", np.zeros((1, cfg.hidden)))
    p.add("pi.critic.w2", xavier(cfg.hidden, 1, (cfg.hidden, 1)))
    p.add("pi.critic.b2", np.zeros((1, 1)))
    return p


def build_actor_mean(obs: DiffNode) -> DiffNode:
    hidden = nm.tanh(nm.add_rowvec(obs @ var("pi.actor.w1"), var("pi.actor.b1")))
    return nm.add_rowvec(hidden @ var("pi.actor.w2"), var("pi.actor.b2"))


def build_critic(obs: DiffNode) -> DiffNode:
    hidden = nm.tanh(nm.add_rowvec(obs @ var("pi.critic.w1"), var("pi.critic.b1")))
    return nm.add_rowvec(hidden @ var("pi.critic.w2"), var("pi.critic.b2"))


def build_log_std() -> DiffNode:
    return nm.clip(var("pi.logstd"), *LOG_STD_BOUNDS)


def build_ppo_loss(obs: DiffNode, actions: DiffNode, old_logp: DiffNode,
                   adv: DiffNode, returns: DiffNode,
                   cfg: PolicyConfig) -> dict[str, DiffNode]:
    """Clipped surrogate + value regression - entropy bonus, as costs.

    ``obs`` may be any expression, so gradients reach whatever produced the
    latent half of the observation.  ``clip_ratio`` of None disables
    clipping (plain importance-weighted surrogate).
    """
    mean = build_actor_mean(obs)
    log_std = build_log_std()
    logp = nm.gaussian_log_density(actions, mean, log_std)
    ratio = nm.exp(nm.sub(logp, old_logp))
    if cfg.clip_ratio is None:
        surr = nm.mul(ratio, adv)
    else:
        clipped = nm.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
        surr = nm.minimum(nm.mul(ratio, adv), nm.mul(clipped, adv))
    surrogate_loss = nm.neg(nm.reduce_mean(surr))
    value = build_critic(obs)
    diff = nm.sub(value, returns)
    value_loss = nm.reduce_mean(nm.mul(diff, diff))
    entropy = nm.add(nm.reduce_sum(log_std),
                     const(0.5 * cfg.d_action * math.log(2.0 * math.pi * math.e)))
    total = nm.add(surrogate_loss,
                   nm.sub(nm.mul(const(cfg.value_coef), value_loss),
                          nm.mul(const(cfg.entropy_coef), entropy)))
    return {"loss": total, "surrogate": surrogate_loss, "value_loss": value_loss,
            "entropy": entropy, "ratio": ratio}


class Policy:
    """Parameter owner with cached evaluation graphs for acting and values."""

    def __init__(self, cfg: PolicyConfig, params: ParamGroup):
        self.cfg = cfg
        self.params = params
        obs = var("obs")
        self._mean_graph = build_actor_mean(obs)
        self._value_graph = build_critic(obs)

    def _bindings(self, obs_rows: np.ndarray) -> dict:
        b = dict(self.params)
        b["obs"] = obs_rows
        return b

    def mean_and_value(self, obs_vec: np.ndarray) -> tuple[np.ndarray, float]:
        obs = np.asarray(obs_vec, dtype=np.float64).reshape(1, -1)
        bindings = self._bindings(obs)
        mean = nm.evaluate(self._mean_graph, bindings)
        value = nm.evaluate(self._value_graph, bindings).item()
        return mean.reshape(-1), value

    def values(self, obs_rows: np.ndarray) -> np.ndarray:
        out = nm.evaluate(self._value_graph, self._bindings(np.atleast_2d(obs_rows)))
        return out.reshape(-1)

    def log_std(self) -> np.ndarray:
        return np.clip(self.params["pi.logstd"], *LOG_STD_BOUNDS).reshape(-1)


def log_prob_diag_gaussian(a: np.ndarray, mean: np.ndarray,
                           log_std: np.ndarray) -> float:
    z = (a - mean) / np.exp(log_std)
    return float(np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)))


@dataclass(frozen=True)
class ActSample:
    action: np.ndarray      # clipped to the environment's box
    raw_action: np.ndarray  # the Gaussian sample the log-prob belongs to
    log_prob: float
    value: float


def act_full(s: np.ndarray, h: np.ndarray, policy: Policy,
             rng: np.random.Generator) -> ActSample:
    """Sample an action for (s, h), keeping both raw and clipped forms.

    The raw sample is what the recorded log probability (and later PPO
    importance ratios) refer to; the clipped action is what the
    environment executes.
    """
    obs = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1),
                          np.asarray(h, dtype=np.float64).reshape(-1)])
    mean, value = policy.mean_and_value(obs)
    log_std = policy.log_std()
    noise = rng.standard_normal(policy.cfg.d_action)
    raw = mean + np.exp(log_std) * noise
    logp = log_prob_diag_gaussian(raw, mean, log_std)
    action = np.clip(raw, policy.cfg.action_low, policy.cfg.action_high)
    return ActSample(action=action, raw_action=raw, log_prob=logp, value=value)


def act(s: np.ndarray, h: np.ndarray, policy: Policy,
        rng: np.random.Generator) -> tuple[np.ndarray, float, float]:
    """Sample an action for (s, h); returns (clipped action, log-prob, value)."""
    out = act_full(s, h, policy, rng)
    return out.action, out.log_prob, out.value


@dataclass
class Trajectory:
    """Per-step rollout records, contiguous in time.

    ``actions`` holds the raw Gaussian samples matching ``log_probs``; the
    clipped actions the environment executed are reproducible from them.
    """

    states: np.ndarray     # (T, d_s)
    latents: np.ndarray    # (T, d_h)
    actions: np.ndarray    # (T, d_a)
    log_probs: np.ndarray  # (T,)
    values: np.ndarray     # (T,)
    rewards: np.ndarray    # (T,)
    dones: np.ndarray      # (T,) 0/1
    steps: np.ndarray      # (T,) step index within episode
    episodes: np.ndarray   # (T,) episode index

    def __len__(self):
        return len(self.rewards)

    @property
    def obs(self) -> np.ndarray:
        return np.concatenate([self.states, self.latents], axis=1)

    @classmethod
    def concat(cls, parts: list["Trajectory"]) -> "Trajectory":
        if not parts:
            raise PolicyError("cannot concatenate zero trajectories")
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("states", "latents", "actions", "log_probs", "values",
                               "rewards", "dones", "steps", "episodes")))


def advantages(traj: Trajectory, gamma: float,
               gae_lambda: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """GAE advantages, value targets and the raw TD errors.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t, with the value
    after the final record treated as zero (batches hold whole episodes).
    Advantages accumulate deltas backwards with factor gamma * lambda.
    """
    if len(traj) == 0:
        raise PolicyError("advantages: empty trajectory")
    values = traj.values
    next_values = np.append(values[1:], 0.0)
    not_done = 1.0 - traj.dones
    deltas = traj.rewards + gamma * next_values * not_done - values
    adv = np.zeros_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * gae_lambda * not_done[t] * acc
        adv[t] = acc
    return adv, adv + values, deltas


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / max(std, 1e-8)


@dataclass
class PpoStats:
    l_policy: float
    surrogate: float
    value_loss: float
    entropy: float


def ppo_update(traj: Trajectory, adv: np.ndarray, returns: np.ndarray,
               policy: Policy, optimizer: Adam,
               rng: np.random.Generator | None = None) -> PpoStats:
    """Minibatched PPO epochs on the policy parameters.

    Each epoch visits the whole batch once in shuffled minibatches (or
    sequential chunks when no rng is given).  Observations enter as data
    here (latents were recorded during the rollout); the end-to-end pass
    that reaches the representation rebuilds the surrogate with
    graph-connected latents in the training harness.  Returns the loss
    components evaluated on the full batch after the final epoch.
    """
    if len(traj) < 1:
        raise PolicyError("ppo_update: empty batch")
    cfg = policy.cfg
    n = len(traj)
    adv_n = normalize_advantages(adv).reshape(-1, 1)
    obs = traj.obs
    actions = traj.actions
    old_logp = traj.log_probs.reshape(-1, 1)
    rets = returns.reshape(-1, 1)
    names = list(policy.params.trainable_names())

    size = min(cfg.minibatch, n)
    # one graph serves every minibatch size: leaf shapes bind at evaluation
    parts = build_ppo_loss(var("obs"), var("mb_actions"), var("mb_old_logp"),
                           var("mb_adv"), var("mb_ret"), cfg)
    bindings = dict(policy.params)
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, size):
            idx = order[start:start + size]
            bindings.update({"obs": obs[idx], "mb_actions": actions[idx],
                             "mb_old_logp": old_logp[idx], "mb_adv": adv_n[idx],
                             "mb_ret": rets[idx]})
            grads = nm.gradient(parts["loss"], bindings, names)
            optimizer.step(grads)
            bindings.update({nme: policy.params[nme] for nme in names})
    bindings.update({"obs": obs, "mb_actions": actions, "mb_old_logp": old_logp,
                     "mb_adv": adv_n, "mb_ret": rets})
    loss = float(nm.evaluate(parts["loss"], bindings))
    return PpoStats(l_policy=loss,
                    surrogate=float(parts["surrogate"].value),
                    value_loss=float(parts["value_loss"].value),
                    entropy=float(parts["entropy"].value))
