"""Run configuration: flat key=value text files with strict validation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Mapping

from ..envs import EnvConfig, EnvError
from ..policy import PolicyConfig, PolicyError
from ..representation import CorepConfig, CorepError

VARIANTS = ("full", "no-corep", "no-vae", "no-guide", "no-sparsity", "no-mag",
            "single-gat", "ppo-only")


class ConfigError(Exception):
    """Invalid, missing or unknown configuration input (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    corep: CorepConfig
    policy_hidden: int = 128
    gamma: float = 0.97
    gae_lambda: float = 0.95
    clip_ratio: float = 0.1
    ppo_epochs: int = 16
    ppo_minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    policy_lr: float = 7e-4
    log_std_init: float = -0.5
    detector_capacity: int = 2000
    detector_alpha: float = 0.1
    detector_eta: float = 1.96
    total_steps: int = 100_000
    episodes_per_batch: int = 4
    repr_updates: int = 8
    repr_minibatch: int = 32
    repr_lr: float = 1e-3
    checkpoint_every: int = 25
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'; choose from {VARIANTS}")
        positive = ("policy_hidden", "ppo_epochs", "ppo_minibatch",
                    "detector_capacity", "episodes_per_batch",
                    "repr_updates", "repr_minibatch", "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if not 0.0 < self.detector_alpha <= 1.0:
            raise ConfigError(f"detector_alpha must be in (0, 1], got {self.detector_alpha}")
        if self.detector_eta < 0:
            raise ConfigError(f"detector_eta must be >= 0, got {self.detector_eta}")
        for name in ("policy_lr", "repr_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")

    def policy_config(self, d_obs: int) -> PolicyConfig:
        spec = self.env.spec
        return PolicyConfig(
            d_obs=d_obs, d_action=spec.d_a,
            action_low=spec.action_low, action_high=spec.action_high,
            hidden=self.policy_hidden, gamma=self.gamma, gae_lambda=self.gae_lambda,
            clip_ratio=self.clip_ratio, epochs=self.ppo_epochs,
            minibatch=self.ppo_minibatch, value_coef=self.value_coef,
            entropy_coef=self.entropy_coef, lr=self.policy_lr,
            log_std_init=self.log_std_init)


# each flat key: (section, attribute, parser)
def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_threshold(v: str):
    return None if v.lower() in ("default", "none") else float(v)


_ENV_KEYS = {
    "env.base": ("base_env", str),
    "env.mode": ("mode", str),
    "env.alpha_d": ("alpha_d", float),
    "env.horizon": ("horizon", int),
}
_COREP_KEYS = {
    "corep.n_nodes": ("n_nodes", int),
    "corep.node_feat_dim": ("node_feat_dim", int),
    "corep.graph_feat_dim": ("graph_feat_dim", int),
    "corep.latent_dim": ("latent_dim", int),
    "corep.layers": ("layers", int),
    "corep.heads": ("heads", int),
    "corep.neighbor_threshold": ("neighbor_threshold", _parse_threshold),
    "corep.lambda_guide": ("lambda_guide", float),
    "corep.lambda_reg": ("lambda_reg", float),
    "corep.feat_hidden": ("feat_hidden", int),
    "corep.enc_hidden": ("enc_hidden", int),
    "corep.dec_hidden": ("dec_hidden", int),
}
_RUN_KEYS = {
    "policy.hidden": ("policy_hidden", int),
    "policy.gamma": ("gamma", float),
    "policy.gae_lambda": ("gae_lambda", float),
    "policy.clip_ratio": ("clip_ratio", float),
    "policy.epochs": ("ppo_epochs", int),
    "policy.minibatch": ("ppo_minibatch", int),
    "policy.value_coef": ("value_coef", float),
    "policy.entropy_coef": ("entropy_coef", float),
    "policy.lr": ("policy_lr", float),
    "policy.log_std_init": ("log_std_init", float),
    "detector.capacity": ("detector_capacity", int),
    "detector.alpha": ("detector_alpha", float),
    "detector.eta": ("detector_eta", float),
    "train.total_steps": ("total_steps", int),
    "train.episodes_per_batch": ("episodes_per_batch", int),
    "train.repr_updates": ("repr_updates", int),
    "train.repr_minibatch": ("repr_minibatch", int),
    "train.repr_lr": ("repr_lr", float),
    "train.checkpoint_every": ("checkpoint_every", int),
    "train.seed": ("seed", int),
    "train.variant": ("variant", str),
}

ALL_KEYS = sorted(set(_ENV_KEYS) | set(_COREP_KEYS) | set(_RUN_KEYS))


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blank lines allowed."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def run_config_from_mapping(mapping: Mapping[str, str]) -> RunConfig:
    """Build a validated RunConfig; unknown keys are rejected."""
    unknown = sorted(set(mapping) - set(ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def collect(table):
        out = {}
        for key, (attr, parse) in table.items():
            if key in mapping:
                try:
                    out[attr] = parse(mapping[key])
                except ValueError as err:
                    raise ConfigError(f"bad value for {key}: {err}") from None
        return out

    try:
        env = EnvConfig(**collect(_ENV_KEYS), seed=int(mapping.get("train.seed", 0)))
        corep = CorepConfig(**collect(_COREP_KEYS))
        return RunConfig(env=env, corep=corep, **collect(_RUN_KEYS))
    except (EnvError, CorepError, PolicyError) as err:
        raise ConfigError(str(err)) from None


def load_run_config(path, overrides: Mapping[str, str] | None = None) -> RunConfig:
    with open(path) as f:
        mapping = parse_config_text(f.read())
    mapping.update(overrides or {})
    return run_config_from_mapping(mapping)


def config_to_text(cfg: RunConfig) -> str:
    """Canonical flat rendering; parsing it back reproduces the config."""
    values = {}
    for key, (attr, _) in _ENV_KEYS.items():
        values[key] = getattr(cfg.env, attr)
    for key, (attr, _) in _COREP_KEYS.items():
        v = getattr(cfg.corep, attr)
        values[key] = "default" if v is None else v
    for key, (attr, _) in _RUN_KEYS.items():
        values[key] = getattr(cfg, attr)
    lines = [f"{key} = {values[key]}" for key in ALL_KEYS]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    env_changes = {k: changes.pop(k) for k in list(changes)
                   if k in ("base_env", "mode", "alpha_d", "horizon")}
    env = replace(cfg.env, **env_changes) if env_changes else cfg.env
    return replace(cfg, env=env, **changes)
