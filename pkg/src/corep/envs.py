"""Analytic toy control environments with injected non-stationarity.

Three base environments, all deterministic given their inputs:

* ``point-reacher``: double integrator on the plane, dt 0.05, action is an
  acceleration in [-1, 1]^2.  State is (position 2, velocity 2, goal 2),
  everything clamped to [-1, 1].  Reward is the negative distance between
  position and goal, so it lives in [-2*sqrt(2), 0].
* ``pendulum``: classic swing-up (g 10, m l 1, dt 0.05, torque in [-2, 2]).
  State is (cos angle, sin angle, angular velocity clamped to [-8, 8]).
  Reward is -(angle^2 + 0.1 * velocity^2 + 0.001 * (torque / 2)^2), which
  lives in [-(pi^2 + 0.1 * 64 + 0.001), 0].
* ``toy-causal``: per-coordinate random walk s' = s + a with a shared scalar
  action, clamped to [-5, 5]; reward is the negative norm of the next state.
  Under the within-episode perturbation this reproduces the analytic
  time-varying-mask model that :func:`toy_causal_step` computes exactly.

Non-stationarity multiplies the base transition coordinate-wise by
``1 + alpha_d * (c1 * cos(c2 * t) + c3 * sin(c4 * i))`` where c1, c2 are
redrawn from Normal(0.5, 0.5) every step and c3, c4 once per episode.  The
within-episode mode keeps only the cos term, the across-episode mode only
the sin term.  Every mode consumes the same random draws, so runs with
different modes or degrees are coupled by common random numbers and a
degree of zero is bit-identical to stationary mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

MODES = ("w+a-ep", "w-ep", "a-ep", "stationary")
BASE_ENVS = ("point-reacher", "pendulum", "toy-causal")


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class EnvSpec:
    d_s: int
    d_a: int
    action_low: float
    action_high: float


ENV_SPECS = {
    "point-reacher": EnvSpec(d_s=6, d_a=2, action_low=-1.0, action_high=1.0),
    "pendulum": EnvSpec(d_s=3, d_a=1, action_low=-2.0, action_high=2.0),
    "toy-causal": EnvSpec(d_s=2, d_a=1, action_low=-1.0, action_high=1.0),
}

_DT = 0.05
_PEND_G = 10.0
_PEND_MAX_SPEED = 8.0
_TOY_BOUND = 5.0


@dataclass(frozen=True)
class EnvConfig:
    base_env: str = "point-reacher"
    mode: str = "w+a-ep"
    alpha_d: float = 1.0
    horizon: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.base_env not in BASE_ENVS:
            raise EnvError(f"unknown base env '{self.base_env}'; choose from {BASE_ENVS}")
        if self.mode not in MODES:
            raise EnvError(f"unknown mode '{self.mode}'; choose from {MODES}")
        if not self.alpha_d >= 0.0:
            raise EnvError(f"alpha_d must be >= 0, got {self.alpha_d}")
        if self.horizon < 1:
            raise EnvError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def spec(self) -> EnvSpec:
        return ENV_SPECS[self.base_env]


@dataclass(frozen=True)
class EnvState:
    s: np.ndarray
    t: int
    i: int
    c3: float
    c4: float
    failed: bool = False


def reset(cfg: EnvConfig, rng: np.random.Generator, i: int) -> EnvState:
    """Draw the initial state plus this episode's perturbation coefficients.

    The coefficient draws happen in every mode so that random streams stay
    aligned across modes and degrees.
    """
    if cfg.base_env == "point-reacher":
        pos = rng.uniform(-1.0, 1.0, size=2)
        goal = rng.uniform(-1.0, 1.0, size=2)
        s = np.concatenate([pos, np.zeros(2), goal])
    elif cfg.base_env == "pendulum":
        theta = rng.uniform(-math.pi, math.pi)
        omega = rng.uniform(-1.0, 1.0)
        s = np.array([math.cos(theta), math.sin(theta), omega])
    else:
        s = rng.uniform(-1.0, 1.0, size=2)
    c3 = rng.normal(0.5, 0.5)
    c4 = rng.normal(0.5, 0.5)
    return EnvState(s=s, t=0, i=i, c3=float(c3), c4=float(c4))


def _base_dynamics(cfg: EnvConfig, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    if cfg.base_env == "point-reacher":
        vel = np.clip(s[2:4] + a * _DT, -1.0, 1.0)
        pos = np.clip(s[0:2] + vel * _DT, -1.0, 1.0)
        return np.concatenate([pos, vel, s[4:6]])
    if cfg.base_env == "pendulum":
        theta = math.atan2(s[1], s[0])
        omega = float(np.clip(s[2], -_PEND_MAX_SPEED, _PEND_MAX_SPEED))
        torque = float(a[0])
        omega2 = omega + (1.5 * _PEND_G * math.sin(theta) + 3.0 * torque) * _DT
        omega2 = float(np.clip(omega2, -_PEND_MAX_SPEED, _PEND_MAX_SPEED))
        theta2 = theta + omega2 * _DT
        return np.array([math.cos(theta2), math.sin(theta2), omega2])
    return np.clip(s + a[0], -_TOY_BOUND, _TOY_BOUND)


def _clamp_state(cfg: EnvConfig, s: np.ndarray) -> np.ndarray:
    if cfg.base_env == "point-reacher":
        return np.clip(s, -1.0, 1.0)
    if cfg.base_env == "pendulum":
        out = s.copy()
        out[0:2] = np.clip(out[0:2], -1.0, 1.0)
        out[2] = np.clip(out[2], -_PEND_MAX_SPEED, _PEND_MAX_SPEED)
        return out
    return np.clip(s, -_TOY_BOUND, _TOY_BOUND)


def _reward(cfg: EnvConfig, s_next: np.ndarray, a: np.ndarray) -> float:
    if cfg.base_env == "point-reacher":
        return -float(np.linalg.norm(s_next[0:2] - s_next[4:6]))
    if cfg.base_env == "pendulum":
        angle = math.atan2(s_next[1], s_next[0])
        omega = float(np.clip(s_next[2], -_PEND_MAX_SPEED, _PEND_MAX_SPEED))
        torque = float(a[0])
        return -(angle ** 2 + 0.1 * omega ** 2 + 0.001 * (torque / 2.0) ** 2)
    return -float(np.linalg.norm(s_next))


def step(state: EnvState, action: np.ndarray, cfg: EnvConfig,
         rng: np.random.Generator) -> tuple[EnvState, float]:
    """One transition with the configured perturbation applied.

    The per-step coefficients are drawn before the mode is consulted; a
    stationary or degree-zero run therefore consumes the identical stream.
    The reward is computed on the perturbed, clamped next state.
    """
    spec = cfg.spec
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(spec.d_a),
                spec.action_low, spec.action_high)
    base = _base_dynamics(cfg, state.s, a)
    c1 = float(rng.normal(0.5, 0.5))
    c2 = float(rng.normal(0.5, 0.5))
    within = c1 * math.cos(c2 * state.t)
    across = state.c3 * math.sin(state.c4 * state.i)
    if cfg.mode == "w+a-ep":
        pert = within + across
    elif cfg.mode == "w-ep":
        pert = within
    elif cfg.mode == "a-ep":
        pert = across
    else:
        pert = 0.0
    s_next = base * (1.0 + cfg.alpha_d * pert)
    s_next = _clamp_state(cfg, s_next)
    if not np.all(np.isfinite(s_next)):
        failed = replace(state, s=state.s, t=state.t + 1, failed=True)
        return failed, 0.0
    reward = _reward(cfg, s_next, a)
    return replace(state, s=s_next, t=state.t + 1), reward


def is_terminal(state: EnvState, cfg: EnvConfig) -> bool:
    return state.failed or state.t >= cfg.horizon


class Environment:
    """Stateful convenience wrapper: owns the episode counter, not the rng."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.episode = -1

    def reset(self, rng: np.random.Generator) -> EnvState:
        self.episode += 1
        return reset(self.cfg, rng, self.episode)

    def step(self, state: EnvState, action, rng: np.random.Generator):
        return step(state, action, self.cfg, rng)


class ToyCausalStep(NamedTuple):
    s_next: np.ndarray
    h: np.ndarray
    h_next: np.ndarray
    mask: np.ndarray


def toy_causal_step(s: np.ndarray, a: float, t: int,
                    n_schedule: Callable[[int], float]) -> ToyCausalStep:
    """Exact update of the analytic time-varying-mask model.

    With n = n_schedule the dynamics are s' = s + a + (s + a) * n(t); the
    hidden block is h = (s + a) * n(t) with h' = (s + h + 2a) * n(t + 1).
    Both induced masks equal n(t + 1) times the identity, which is also
    returned for inspection.
    """
    s = np.asarray(s, dtype=np.float64)
    n_now = float(n_schedule(t))
    n_next = float(n_schedule(t + 1))
    h = (s + a) * n_now
    s_next = s + a + h
    h_next = (s + h + 2.0 * a) * n_next
    mask = n_next * np.eye(s.size)
    return ToyCausalStep(s_next=s_next, h=h, h_next=h_next, mask=mask)
