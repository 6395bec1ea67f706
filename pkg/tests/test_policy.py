import math

import numpy as np
import pytest

from corep import numerics as nm
from corep.numerics import Adam, const, var
from corep.policy import (
    Policy,
    PolicyConfig,
    PolicyError,
    Trajectory,
    act,
    act_full,
    advantages,
    build_ppo_loss,
    init_policy_params,
    log_prob_diag_gaussian,
    normalize_advantages,
    ppo_update,
)

RNG = np.random.default_rng(777)


def make_policy(d_obs=4, d_a=2, hidden=16, seed=0, **kw):
    cfg = PolicyConfig(d_obs=d_obs, d_action=d_a, action_low=-1.0, action_high=1.0,
                       hidden=hidden, **kw)
    return Policy(cfg, init_policy_params(cfg, np.random.default_rng(seed)))


def random_traj(policy, n=12, seed=1):
    rng = np.random.default_rng(seed)
    d_obs, d_a = policy.cfg.d_obs, policy.cfg.d_action
    states = rng.uniform(-1, 1, (n, d_obs - 1))
    latents = rng.uniform(-1, 1, (n, 1))
    actions, logps, values = [], [], []
    for k in range(n):
        out = act_full(states[k], latents[k], policy, rng)
        actions.append(out.raw_action)
        logps.append(out.log_prob)
        values.append(out.value)
    dones = np.zeros(n)
    dones[n // 2 - 1] = 1.0
    dones[-1] = 1.0
    return Trajectory(states=states, latents=latents, actions=np.array(actions),
                      log_probs=np.array(logps), values=np.array(values),
                      rewards=rng.uniform(-1, 0, n), dones=dones,
                      steps=np.arange(n) % (n // 2), episodes=np.arange(n) // (n // 2))


# ---------------------------------------------------------------------------
# acting

def test_tiny_log_std_acts_near_mean():
    policy = make_policy()
    policy.params.set("pi.logstd", np.full((1, 2), -5.0))
    rng = np.random.default_rng(3)
    s, h = np.zeros(3), np.zeros(1)
    mean, _ = policy.mean_and_value(np.zeros(4))
    for _ in range(50):
        a, _, _ = act(s, h, policy, rng)
        assert np.all(np.abs(a - np.clip(mean, -1, 1)) < 0.05)


def test_act_reproducible_with_seed():
    policy = make_policy()
    out1 = [act(np.zeros(3), np.zeros(1), policy, np.random.default_rng(9))[0]
            for _ in range(1)]
    out2 = [act(np.zeros(3), np.zeros(1), policy, np.random.default_rng(9))[0]
            for _ in range(1)]
    assert np.array_equal(out1, out2)


def test_log_prob_matches_closed_form_density():
    policy = make_policy(seed=4)
    rng = np.random.default_rng(5)
    s, h = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 1)
    sample_rng = np.random.default_rng(6)
    a, logp, _ = act(s, h, policy, sample_rng)
    # recompute: same noise stream gives the raw sample back
    mean, _ = policy.mean_and_value(np.concatenate([s, h]))
    noise = np.random.default_rng(6).standard_normal(2)
    raw = mean + np.exp(policy.log_std()) * noise
    sd = np.exp(policy.log_std())
    want = sum(-0.5 * ((raw[j] - mean[j]) / sd[j]) ** 2 - math.log(sd[j])
               - 0.5 * math.log(2 * math.pi) for j in range(2))
    assert abs(logp - want) < 1e-12


def test_action_clipped_to_box():
    policy = make_policy()
    policy.params.set("pi.actor.b2", np.full((1, 2), 50.0))  # push mean far out
    a, _, _ = act(np.zeros(3), np.zeros(1), policy, np.random.default_rng(0))
    assert np.all(a <= 1.0) and np.all(a >= -1.0)


# ---------------------------------------------------------------------------
# advantages / TD errors

def test_gamma_zero_zero_values_advantage_is_reward():
    policy = make_policy()
    traj = random_traj(policy)
    traj.values[:] = 0.0
    adv, rets, deltas = advantages(traj, gamma=0.0, gae_lambda=0.95)
    assert np.allclose(adv, traj.rewards, atol=1e-15)
    assert np.allclose(deltas, traj.rewards, atol=1e-15)
    assert np.allclose(rets, traj.rewards, atol=1e-15)


def test_single_terminal_step_delta():
    traj = Trajectory(states=np.zeros((1, 2)), latents=np.zeros((1, 1)),
                      actions=np.zeros((1, 1)), log_probs=np.zeros(1),
                      values=np.array([0.4]), rewards=np.array([1.0]),
                      dones=np.array([1.0]), steps=np.zeros(1), episodes=np.zeros(1))
    _, _, deltas = advantages(traj, gamma=0.97, gae_lambda=0.95)
    assert abs(deltas[0] - (1.0 - 0.4)) < 1e-15


def test_three_step_hand_recursion():
    gamma, lam = 0.97, 0.95
    rewards = np.array([1.0, -0.5, 2.0])
    values = np.array([0.3, 0.1, -0.2])
    traj = Trajectory(states=np.zeros((3, 2)), latents=np.zeros((3, 1)),
                      actions=np.zeros((3, 1)), log_probs=np.zeros(3),
                      values=values, rewards=rewards,
                      dones=np.array([0.0, 0.0, 1.0]),
                      steps=np.arange(3), episodes=np.zeros(3))
    adv, rets, deltas = advantages(traj, gamma, lam)
    # unrolled by hand
    d2 = 2.0 - (-0.2)
    d1 = -0.5 + gamma * (-0.2) - 0.1
    d0 = 1.0 + gamma * 0.1 - 0.3
    a2 = d2
    a1 = d1 + gamma * lam * a2
    a0 = d0 + gamma * lam * a1
    assert np.allclose(deltas, [d0, d1, d2], atol=1e-15)
    assert np.allclose(adv, [a0, a1, a2], atol=1e-15)
    assert np.allclose(rets, adv + values, atol=1e-15)


def test_done_boundary_stops_bootstrap():
    traj = Trajectory(states=np.zeros((2, 2)), latents=np.zeros((2, 1)),
                      actions=np.zeros((2, 1)), log_probs=np.zeros(2),
                      values=np.array([1.0, 5.0]), rewards=np.array([0.0, 0.0]),
                      dones=np.array([1.0, 1.0]), steps=np.zeros(2),
                      episodes=np.arange(2))
    _, _, deltas = advantages(traj, 0.97, 0.95)
    assert abs(deltas[0] - (-1.0)) < 1e-15  # no leak from the next episode


def test_delta_stream_reproducible_from_logs():
    policy = make_policy(seed=7)
    traj = random_traj(policy, n=20, seed=8)
    _, _, deltas = advantages(traj, 0.97, 0.95)
    values = policy.values(traj.obs)
    assert np.allclose(values, traj.values, atol=1e-12)
    next_values = np.append(values[1:], 0.0)
    redo = traj.rewards + 0.97 * next_values * (1 - traj.dones) - values
    assert np.allclose(redo, deltas, atol=1e-12)


# ---------------------------------------------------------------------------
# PPO update

def test_unit_ratio_surrogate_is_negative_mean_advantage():
    policy = make_policy(seed=10)
    traj = random_traj(policy, n=8, seed=11)
    adv = RNG.uniform(-1, 1, 8).reshape(-1, 1)
    parts = build_ppo_loss(var("obs"), const(traj.actions),
                           const(traj.log_probs.reshape(-1, 1)), const(adv),
                           const(np.zeros((8, 1))), policy.cfg)
    bindings = dict(policy.params)
    bindings["obs"] = traj.obs
    nm.evaluate(parts["loss"], bindings)
    ratio = parts["ratio"].value
    assert np.allclose(ratio, 1.0, atol=1e-9)  # same params that produced logp
    assert abs(float(parts["surrogate"].value) + adv.mean()) < 1e-9


def test_positive_advantage_large_ratio_clipped():
    cfg = PolicyConfig(d_obs=2, d_action=1, action_low=-1, action_high=1,
                       hidden=4, clip_ratio=0.1)
    # ratio exp(logp - old_logp) with old_logp shifted to force ratio 1 + 2 eps
    policy = Policy(cfg, init_policy_params(cfg, np.random.default_rng(1)))
    obs = np.zeros((1, 2))
    mean, _ = policy.mean_and_value(obs[0])
    a = mean.reshape(1, 1)  # at the mean the new logp is the max
    new_logp = log_prob_diag_gaussian(a[0], mean, policy.log_std())
    old_logp = new_logp - math.log(1.2)
    parts = build_ppo_loss(var("obs"), const(a), const([[old_logp]]),
                           const([[1.0]]), const([[0.0]]), cfg)
    bindings = dict(policy.params)
    bindings["obs"] = obs
    nm.evaluate(parts["loss"], bindings)
    assert abs(parts["ratio"].value.item() - 1.2) < 1e-12
    # clipped at 1.1: surrogate = -min(1.2 * 1, 1.1 * 1)
    assert abs(parts["surrogate"].value.item() + 1.1) < 1e-12


def test_two_sample_objective_matches_scalar_recomputation():
    policy = make_policy(d_obs=3, d_a=1, hidden=5, seed=12)
    cfg = policy.cfg
    obs = RNG.uniform(-1, 1, (2, 3))
    actions = RNG.uniform(-1, 1, (2, 1))
    old_logp = np.array([[-1.1], [-0.7]])
    adv = np.array([[0.6], [-0.4]])
    rets = np.array([[0.2], [0.1]])
    parts = build_ppo_loss(var("obs"), const(actions), const(old_logp),
                           const(adv), const(rets), cfg)
    bindings = dict(policy.params)
    bindings["obs"] = obs
    got = float(nm.evaluate(parts["loss"], bindings))

    # straight-line recomputation
    log_std = policy.log_std()
    surr_terms, v_terms = [], []
    for k in range(2):
        mean, value = policy.mean_and_value(obs[k])
        lp = log_prob_diag_gaussian(actions[k], mean, log_std)
        ratio = math.exp(lp - old_logp[k, 0])
        clipped = min(max(ratio, 1 - cfg.clip_ratio), 1 + cfg.clip_ratio)
        surr_terms.append(min(ratio * adv[k, 0], clipped * adv[k, 0]))
        v_terms.append((value - rets[k, 0]) ** 2)
    entropy = float(np.sum(log_std)) + 0.5 * 1 * math.log(2 * math.pi * math.e)
    want = (-np.mean(surr_terms) + cfg.value_coef * np.mean(v_terms)
            - cfg.entropy_coef * entropy)
    assert abs(got - want) < 1e-10


def test_unclipped_gradient_is_vanilla_policy_gradient():
    cfg = PolicyConfig(d_obs=3, d_action=2, action_low=-1, action_high=1,
                       hidden=5, clip_ratio=None, epochs=1,
                       value_coef=0.0, entropy_coef=0.0)
    policy = Policy(cfg, init_policy_params(cfg, np.random.default_rng(13)))
    rng = np.random.default_rng(14)
    n = 6
    obs = rng.uniform(-1, 1, (n, 3))
    actions, logps = [], []
    for k in range(n):
        out = act_full(obs[k, :2], obs[k, 2:], policy, rng)
        actions.append(out.raw_action)
        logps.append(out.log_prob)
    actions = np.array(actions)
    logps = np.array(logps).reshape(-1, 1)
    adv = rng.uniform(-1, 1, (n, 1))
    parts = build_ppo_loss(var("obs"), const(actions), const(logps), const(adv),
                           const(np.zeros((n, 1))), cfg)
    bindings = dict(policy.params)
    bindings["obs"] = obs
    actor_names = [nme for nme in policy.params if nme.startswith(("pi.actor", "pi.logstd"))]
    analytic = nm.gradient(parts["loss"], bindings, actor_names)

    # vanilla estimator: -(1/n) sum_k adv_k * grad log pi(a_k | obs_k),
    # with grad log pi taken by central finite differences
    def weighted_logp_sum():
        log_std = policy.log_std()
        return sum(adv[k, 0] * log_prob_diag_gaussian(
            actions[k], policy.mean_and_value(obs[k])[0], log_std)
            for k in range(n))

    eps = 1e-6
    for name in actor_names:
        base = policy.params[name].copy()
        fd = np.zeros(base.size)
        for idx in range(base.size):
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.reshape(-1)[idx] += sign * eps
                policy.params.set(name, bumped)
                fd[idx] += sign * weighted_logp_sum() / (2 * eps * n)
        policy.params.set(name, base)
        fd = fd.reshape(base.shape)
        err = np.max(np.abs(analytic[name] - (-fd)) / np.maximum(1.0, np.abs(fd)))
        assert err < 1e-4, f"{name}: {err}"


def test_advantage_normalization_preserves_argmax_on_centered_batch():
    # candidates ranked by the unclipped surrogate: positive rescaling of a
    # centered advantage vector must not change the ranking's argmax
    cfg = PolicyConfig(d_obs=3, d_action=1, action_low=-1, action_high=1,
                       hidden=4, clip_ratio=None)
    policy = Policy(cfg, init_policy_params(cfg, np.random.default_rng(15)))
    rng = np.random.default_rng(16)
    n = 10
    obs = rng.uniform(-1, 1, (n, 3))
    actions = rng.uniform(-1, 1, (n, 1))
    logps = np.full((n, 1), -1.0)
    adv = rng.uniform(-1, 1, (n, 1))
    adv -= adv.mean()  # centered: standardization is a pure positive scaling
    adv_n = normalize_advantages(adv.reshape(-1)).reshape(-1, 1)
    assert abs(adv_n.mean()) < 1e-12 and abs(adv_n.std() - 1.0) < 1e-12

    def scores(advantage):
        parts = build_ppo_loss(var("obs"), const(actions), const(logps),
                               const(advantage), const(np.zeros((n, 1))), cfg)
        out = []
        for seed in range(8):
            cand_rng = np.random.default_rng(100 + seed)
            bindings = {name: policy.params[name]
                        + 0.05 * cand_rng.standard_normal(policy.params[name].shape)
                        for name in policy.params}
            bindings["obs"] = obs
            out.append(-float(nm.evaluate(parts["loss"], bindings)))
        return out

    assert int(np.argmax(scores(adv))) == int(np.argmax(scores(adv_n)))


def test_ppo_update_improves_surrogate_and_runs_epochs():
    policy = make_policy(seed=17, hidden=8)
    traj = random_traj(policy, n=16, seed=18)
    adv, rets, _ = advantages(traj, policy.cfg.gamma, policy.cfg.gae_lambda)
    opt = Adam(policy.params, lr=policy.cfg.lr)
    before = {n: policy.params[n].copy() for n in policy.params}
    stats = ppo_update(traj, adv, rets, policy, opt)
    assert math.isfinite(stats.l_policy)
    assert opt.t == policy.cfg.epochs
    assert any(not np.array_equal(before[n], policy.params[n]) for n in policy.params)


def test_ppo_update_rejects_empty_batch():
    policy = make_policy()
    empty = Trajectory(*(np.zeros((0, d)) if d else np.zeros(0)
                         for d in (3, 1, 2, 0, 0, 0, 0, 0, 0)))
    with pytest.raises(PolicyError, match="empty"):
        ppo_update(empty, np.zeros(0), np.zeros(0), policy, Adam(policy.params, 1e-3))


def test_trajectory_concat():
    policy = make_policy()
    a = random_traj(policy, n=6, seed=20)
    b = random_traj(policy, n=8, seed=21)
    both = Trajectory.concat([a, b])
    assert len(both) == 14
    assert np.array_equal(both.rewards[:6], a.rewards)
    assert np.array_equal(both.states[6:], b.states)
