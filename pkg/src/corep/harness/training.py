"""Training loop, metrics, checkpoints, ablations, sweeps and exports.

One outer iteration collects a batch of whole episodes, computes advantages
and TD errors, consults the detector gate (freezing or unfreezing the core
branch and the shared featurizer), runs the PPO epochs on the policy, then
runs end-to-end minibatch passes on the total loss so the policy term's
gradient reaches the representation.  TD-error magnitudes are pushed into
the detector buffer at the end of the iteration.

Everything is driven by named rng streams spawned from the run seed, so a
(config, seed) pair reproduces metrics, trajectories, checkpoints and
exports bit-for-bit (the wall-clock column is the one exception, which
:func:`metrics_fingerprint` skips).
"""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nm
from ..envs import Environment, is_terminal
from ..numerics import NumericsError
from ..policy import Trajectory, act_full, advantages, normalize_advantages, ppo_update
from ..td_detect import TdBuffer, should_update_core
from .checkpoint import (
    TrainState,
    load_checkpoint,
    restore_rng,
    restore_td_buffer,
    rng_state,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, VARIANTS, with_overrides
from .model import FROZEN_GROUPS, Model

METRICS_COLUMNS = ["iter", "env_steps", "return_mean", "return_std", "L_policy",
                   "L_guide", "L_MAG", "L_sparsity", "L_VAE_recon", "L_VAE_kl",
                   "L_total", "core_frozen", "delta_alpha", "mu_delta",
                   "sigma_delta", "seconds"]

STREAM_NAMES = ("init", "env", "action", "vae", "minibatch", "ppo")


class TrainingAbort(Exception):
    """Numerical failure during training; names the failing component."""

    def __init__(self, component: str, detail: str):
        self.component = component
        super().__init__(f"numerical failure in {component}: {detail}")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child)
            for name, child in zip(STREAM_NAMES, children)}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainResult:
    metrics_path: Path
    trajectory_path: Path
    checkpoint_paths: list[Path]
    iterations: int
    env_steps: int
    final_return: float
    return_history: list[float]


def _collect_batch(cfg: RunConfig, model: Model, env: Environment,
                   streams, traj_writer):
    """Roll out one batch of whole episodes with the current parameters."""
    episodes = []
    returns = []
    for _ in range(cfg.episodes_per_batch):
        state = env.reset(streams["env"])
        rows = {k: [] for k in ("states", "latents", "actions", "log_probs",
                                "values", "rewards", "dones", "steps", "episodes")}
        total = 0.0
        while not is_terminal(state, cfg.env):
            noise = (streams["vae"].standard_normal(model.d_h)
                     if model.has_vae else None)
            try:
                h = model.latent(state.s, noise)
            except NumericsError as err:
                raise TrainingAbort("representation forward", str(err)) from err
            sample = act_full(state.s, h, model.policy, streams["action"])
            nxt, reward = env.step(state, sample.action, streams["env"])
            rows["states"].append(state.s.copy())
            rows["latents"].append(h)
            rows["actions"].append(sample.raw_action)
            rows["log_probs"].append(sample.log_prob)
            rows["values"].append(sample.value)
            rows["rewards"].append(reward)
            rows["dones"].append(1.0 if is_terminal(nxt, cfg.env) else 0.0)
            rows["steps"].append(state.t)
            rows["episodes"].append(env.episode)
            if traj_writer is not None:
                traj_writer.writerow(
                    [env.episode, state.t]
                    + [_fmt(float(v)) for v in state.s]
                    + [_fmt(float(v)) for v in sample.action]
                    + [_fmt(float(reward)), int(rows["dones"][-1])])
            total += reward
            state = nxt
        episodes.append(Trajectory(
            states=np.array(rows["states"]), latents=np.array(rows["latents"]),
            actions=np.array(rows["actions"]), log_probs=np.array(rows["log_probs"]),
            values=np.array(rows["values"]), rewards=np.array(rows["rewards"]),
            dones=np.array(rows["dones"]), steps=np.array(rows["steps"]),
            episodes=np.array(rows["episodes"])))
        returns.append(total)
    return Trajectory.concat(episodes), np.array(returns)


def _identify_failing_part(parts, bindings) -> str:
    order = [("policy", "L_policy"), ("guide", "L_guide"), ("mag", "L_MAG"),
             ("sparsity", "L_sparsity"), ("recon", "L_VAE_recon"), ("kl", "L_VAE_kl")]
    for key, label in order:
        if key in parts:
            try:
                nm.evaluate(parts[key], bindings)
            except NumericsError:
                return label
    return "L_total"


def _joint_updates(cfg: RunConfig, model: Model, optimizers, batch: Trajectory,
                   adv_n: np.ndarray, returns: np.ndarray, streams):
    """End-to-end minibatch passes on the total loss; returns component means.

    Minibatch states are stacked block-diagonally, so one expression-graph
    pass computes the per-state mean of every loss component exactly.
    """
    size = min(cfg.repr_minibatch, len(batch))
    parts = model.joint_loss_parts(size)
    if parts is None:
        return {}
    base = model.repr_bindings()
    base.update(model.policy.params)
    names = model.trainable_names()
    sums: dict[str, float] = {}
    for _ in range(cfg.repr_updates):
        idx = streams["minibatch"].integers(0, len(batch), size=size)
        base["s"] = batch.states[idx]
        base["noise"] = (streams["vae"].standard_normal((size, model.d_h))
                         if model.has_vae else np.zeros((size, model.d_h)))
        base["action"] = batch.actions[idx]
        base["old_logp"] = batch.log_probs[idx].reshape(-1, 1)
        base["adv"] = adv_n[idx].reshape(-1, 1)
        base["ret"] = returns[idx].reshape(-1, 1)
        try:
            grads = nm.gradient(parts["total"], base, names)
        except NumericsError as err:
            raise TrainingAbort(_identify_failing_part(parts, base),
                                str(err)) from err
        for key, node in parts.items():
            sums[key] = sums.get(key, 0.0) + float(node.value)
        for group_name in model.groups:
            if model.core_frozen and group_name in FROZEN_GROUPS:
                continue
            optimizers[group_name].step(grads)
        optimizers["policy"].step(grads)
        base.update(model.repr_bindings())
        base.update(model.policy.params)
    return {key: total / cfg.repr_updates for key, total in sums.items()}


def train(cfg: RunConfig, outdir, resume_from=None) -> TrainResult:
    """Run the training loop; writes metrics.csv, trajectory.csv, checkpoints."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    streams = make_streams(cfg.seed)
    model = Model(cfg, streams["init"])
    optimizers = model.make_optimizers()
    td_buffer = TdBuffer(cfg.detector_capacity)
    env = Environment(cfg.env)
    iteration = 0
    env_steps = 0

    if resume_from is not None:
        saved_cfg, state = load_checkpoint(resume_from)
        if saved_cfg != cfg:
            raise ConfigError("checkpoint config does not match the provided config")
        _load_state_into(model, optimizers, state)
        streams = {name: restore_rng(state.rng_states[name])
                   for name in STREAM_NAMES if name in state.rng_states}
        td_buffer = restore_td_buffer(state.td_values, cfg.detector_capacity)
        env.episode = state.episode
        iteration = state.iteration
        env_steps = state.env_steps

    spec = cfg.env.spec
    metrics_path = outdir / "metrics.csv"
    traj_path = outdir / "trajectory.csv"
    checkpoints: list[Path] = []
    history: list[float] = []
    start = time.perf_counter()
    open_mode = "a" if resume_from is not None else "w"
    with open(metrics_path, open_mode, newline="") as mf, \
            open(traj_path, open_mode, newline="") as tf:
        metrics = csv.writer(mf)
        traj = csv.writer(tf)
        if mf.tell() == 0:
            metrics.writerow(METRICS_COLUMNS)
        if tf.tell() == 0:
            traj.writerow(["episode", "step"]
                          + [f"s{i}" for i in range(spec.d_s)]
                          + [f"a{i}" for i in range(spec.d_a)]
                          + ["reward", "done"])
        while env_steps < cfg.total_steps:
            iteration += 1
            batch, ep_returns = _collect_batch(cfg, model, env, streams, traj)
            env_steps += len(batch)
            adv, rets, deltas = advantages(batch, cfg.gamma, cfg.gae_lambda)

            gate_stats = (None, None, None)
            core_frozen = None
            if model.uses_gate:
                if len(td_buffer) > 0:
                    gate_stats = (td_buffer.recent_mean(cfg.detector_alpha),
                                  td_buffer.mean(), td_buffer.std())
                update_core = should_update_core(td_buffer, cfg.detector_alpha,
                                                 cfg.detector_eta)
                model.core_frozen = not update_core
                core_frozen = int(model.core_frozen)
            elif model.is_dual:
                core_frozen = 0   # no gate: the core updates continuously

            try:
                stats = ppo_update(batch, adv, rets, model.policy,
                                   optimizers["policy"], rng=streams["ppo"])
            except NumericsError as err:
                raise TrainingAbort("L_policy", str(err)) from err

            adv_n = normalize_advantages(adv)
            parts = _joint_updates(cfg, model, optimizers, batch, adv_n, rets,
                                   streams)
            for d in deltas:
                td_buffer.push(float(d))

            history.append(float(ep_returns.mean()))
            metrics.writerow([
                iteration, env_steps,
                _fmt(float(ep_returns.mean())), _fmt(float(ep_returns.std())),
                _fmt(stats.l_policy),
                _fmt(parts.get("guide")), _fmt(parts.get("mag")),
                _fmt(parts.get("sparsity")), _fmt(parts.get("recon")),
                _fmt(parts.get("kl")),
                _fmt(parts.get("total", stats.l_policy)),
                _fmt(core_frozen),
                _fmt(gate_stats[0]), _fmt(gate_stats[1]), _fmt(gate_stats[2]),
                _fmt(time.perf_counter() - start),
            ])
            mf.flush()
            if iteration % cfg.checkpoint_every == 0:
                path = outdir / f"checkpoint_{iteration:06d}.txt"
                save_checkpoint(path, cfg, _capture_state(model, optimizers,
                                                          streams, td_buffer,
                                                          iteration, env_steps,
                                                          env.episode))
                checkpoints.append(path)
        final = outdir / "checkpoint_final.txt"
        save_checkpoint(final, cfg, _capture_state(model, optimizers, streams,
                                                   td_buffer, iteration,
                                                   env_steps, env.episode))
        checkpoints.append(final)

    window = max(1, len(history) // 4)
    final_return = float(np.mean(history[-window:])) if history else 0.0
    return TrainResult(metrics_path=metrics_path, trajectory_path=traj_path,
                       checkpoint_paths=checkpoints, iterations=iteration,
                       env_steps=env_steps, final_return=final_return,
                       return_history=history)


def _capture_state(model: Model, optimizers, streams, td_buffer: TdBuffer,
                   iteration: int, env_steps: int, episode: int) -> TrainState:
    groups = {name: group.copy() for name, group in model.groups.items()}
    groups["policy"] = model.policy.params.copy()
    return TrainState(
        iteration=iteration, env_steps=env_steps, episode=episode,
        groups=groups,
        adam_states={name: opt.state_group() for name, opt in optimizers.items()},
        rng_states={name: rng_state(gen) for name, gen in streams.items()},
        td_values=td_buffer.values())


def _load_state_into(model: Model, optimizers, state: TrainState) -> None:
    for name, group in state.groups.items():
        target = model.policy.params if name == "policy" else model.groups.get(name)
        if target is None:
            raise ConfigError(f"checkpoint group '{name}' has no home in this model")
        for param in group:
            target.set(param, group[param])
    for name, opt in optimizers.items():
        if name in state.adam_states:
            opt.load_state_group(state.adam_states[name])


def metrics_fingerprint(path) -> str:
    """Hash of a metrics file with the wall-clock column removed."""
    digest = hashlib.sha256()
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if row and row != METRICS_COLUMNS:
                row = row[:-1]
            digest.update("\x1f".join(row).encode())
            digest.update(b"\n")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# ablations and sweeps

def ablate(cfg: RunConfig, variants: list[str], outdir) -> list[dict]:
    """Run the listed variants with common random numbers; normalize to full."""
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise ConfigError(f"unknown variants: {', '.join(unknown)}")
    outdir = Path(outdir)
    ordered = list(dict.fromkeys(["full", *variants]))
    results = {}
    for variant in ordered:
        run_cfg = with_overrides(cfg, variant=variant)
        results[variant] = train(run_cfg, outdir / variant)
    base = results["full"].final_return
    rows = []
    for variant in ordered:
        r = results[variant]
        normalized = r.final_return / base if base != 0.0 else float("nan")
        rows.append({"variant": variant, "final_return": r.final_return,
                     "normalized": normalized})
    with open(outdir / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "final_return", "normalized"])
        for row in rows:
            writer.writerow([row["variant"], _fmt(row["final_return"]),
                             _fmt(row["normalized"])])
    return rows


def degree_sweep(cfg: RunConfig, degrees: list[float], outdir) -> list[dict]:
    """Train at each non-stationarity degree; normalize to degree 1.0."""
    if not degrees:
        raise ConfigError("degree sweep needs at least one degree")
    if any(d < 0 for d in degrees):
        raise ConfigError("degrees must be >= 0")
    outdir = Path(outdir)
    wanted = list(dict.fromkeys(degrees))
    run_degrees = wanted if 1.0 in wanted else [*wanted, 1.0]
    results = {}
    for degree in run_degrees:
        run_cfg = with_overrides(cfg, alpha_d=float(degree))
        results[degree] = train(run_cfg, outdir / f"degree_{degree:g}")
    base = results[1.0].final_return
    rows = []
    for degree in run_degrees:
        r = results[degree]
        normalized = r.final_return / base if base != 0.0 else float("nan")
        rows.append({"degree": degree, "final_return": r.final_return,
                     "normalized": normalized})
    with open(outdir / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["degree", "final_return", "normalized"])
        for row in rows:
            writer.writerow([_fmt(float(row["degree"])), _fmt(row["final_return"]),
                             _fmt(row["normalized"])])
    return rows


# ---------------------------------------------------------------------------
# adjacency export

def export_graph(checkpoint_path, state_sample, outdir) -> tuple[Path, Path]:
    """Write the core and general adjacencies at a probe state as CSV."""
    cfg, state = load_checkpoint(checkpoint_path)
    model = Model(cfg, np.random.default_rng(0))
    _load_state_into(model, model.make_optimizers(), state)
    sample = np.asarray(state_sample, dtype=np.float64).reshape(-1)
    if sample.size != cfg.env.spec.d_s:
        raise ConfigError(f"state sample has dimension {sample.size}, "
                          f"expected {cfg.env.spec.d_s}")
    try:
        a_core, a_general = model.adjacency_pair(sample)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = (outdir / "A_core.csv", outdir / "A_general.csv")
    for path, matrix in zip(paths, (a_core, a_general)):
        with open(path, "w") as f:
            for row in matrix:
                f.write(",".join(f"{v:.9g}" for v in row) + "\n")
    return paths


# ---------------------------------------------------------------------------
# stand-alone VAE fitting (used by the reconstruction smoke check)

def fit_vae(cfg: RunConfig, states: np.ndarray, steps: int, minibatch: int,
            seed: int) -> tuple[float, float]:
    """Train the representation stack as an autoencoder on stored states.

    The objective is the Gaussian negative log likelihood with one learned
    global observation scale plus the latent KL; a fixed equal-weight
    MSE+KL objective collapses the posterior on low-variance state data,
    while the learned scale self-calibrates the likelihood weight as the
    reconstruction improves.  Returns the mean-path reconstruction error
    (plain per-state MSE) over the dataset before and after training.
    """
    streams = make_streams(seed)
    model = Model(with_overrides(cfg, variant="full"), streams["init"])
    optimizers = model.make_optimizers()
    parts = model.joint_loss_parts(minibatch)
    d_s = cfg.env.spec.d_s
    obs_scale = nm.ParamGroup()
    obs_scale.add("vae.log_sigma_obs", np.zeros(()))
    obs_opt = nm.Adam(obs_scale, lr=cfg.repr_lr)
    log_sigma_obs = nm.var("vae.log_sigma_obs")
    nll = nm.add(nm.mul(nm.mul(nm.const(0.5 * d_s),
                               nm.exp(nm.mul(nm.const(-2.0), log_sigma_obs))),
                        parts["recon"]),
                 nm.mul(nm.const(float(d_s)), log_sigma_obs))
    loss = nm.add(nll, parts["kl"])
    names = [n for n in model.trainable_names() if not n.startswith("pi.")]
    names.append("vae.log_sigma_obs")
    states = np.asarray(states, dtype=np.float64)

    def eval_mse() -> float:
        """Mean-path (zero noise) reconstruction error over the dataset."""
        bindings = model.repr_bindings()
        total = 0.0
        for start in range(0, len(states), minibatch):
            chunk = states[start:start + minibatch]
            eval_parts = model.joint_loss_parts(len(chunk))
            bindings["s"] = chunk
            bindings["noise"] = np.zeros((len(chunk), model.d_h))
            total += float(nm.evaluate(eval_parts["recon"], bindings)) * len(chunk)
        return total / len(states)

    initial = eval_mse()
    base = model.repr_bindings()
    base.update(obs_scale)
    for _ in range(steps):
        idx = streams["minibatch"].integers(0, len(states), size=minibatch)
        base["s"] = states[idx]
        base["noise"] = streams["vae"].standard_normal((minibatch, model.d_h))
        grads = nm.gradient(loss, base, names)
        for group_name in model.groups:
            optimizers[group_name].step(grads)
        obs_opt.step(grads)
        base.update(model.repr_bindings())
        base.update(obs_scale)
    return initial, eval_mse()
