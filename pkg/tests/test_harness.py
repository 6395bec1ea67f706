import csv
from pathlib import Path

import numpy as np
import pytest

from corep.harness import (
    ConfigError,
    Model,
    TrainingAbort,
    ablate,
    degree_sweep,
    export_graph,
    metrics_fingerprint,
    run_config_from_mapping,
    train,
    with_overrides,
)
from corep.harness.checkpoint import load_checkpoint
from corep.harness.cli import main as cli_main
from corep.harness.config import (
    config_hash,
    config_to_text,
    load_run_config,
    parse_config_text,
)
from corep.harness.training import METRICS_COLUMNS

TINY = {
    "env.base": "point-reacher", "env.mode": "w+a-ep", "env.alpha_d": "1.0",
    "env.horizon": "20", "train.total_steps": "160",
    "train.episodes_per_batch": "2", "train.seed": "0",
    "corep.n_nodes": "3", "corep.node_feat_dim": "2", "corep.graph_feat_dim": "2",
    "corep.latent_dim": "2", "corep.feat_hidden": "8", "corep.enc_hidden": "12",
    "corep.dec_hidden": "10", "policy.hidden": "16",
    "train.repr_updates": "2", "train.repr_minibatch": "8",
    "train.checkpoint_every": "2",
}


def tiny_cfg(**overrides):
    mapping = dict(TINY)
    mapping.update({k: str(v) for k, v in overrides.items()})
    return run_config_from_mapping(mapping)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ---------------------------------------------------------------------------
# configuration

def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys: env.gravty"):
        run_config_from_mapping({"env.gravty": "9.8"})


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="env.horizon"):
        run_config_from_mapping({"env.horizon": "twenty"})
    with pytest.raises(ConfigError, match="variant"):
        run_config_from_mapping({"train.variant": "fancy"})
    with pytest.raises(ConfigError, match="alpha_d"):
        run_config_from_mapping({"env.alpha_d": "-1"})


def test_config_text_roundtrip():
    cfg = tiny_cfg()
    back = run_config_from_mapping(parse_config_text(config_to_text(cfg)))
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nenv.base = pendulum\ntrain.seed = 3\n")
    cfg = load_run_config(path, {"train.seed": "7"})
    assert cfg.env.base_env == "pendulum"
    assert cfg.seed == 7


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("train.seed = 1\ntrain.seed = 2\n")


# ---------------------------------------------------------------------------
# training loop basics

def test_metrics_schema_and_rows(tmp_path):
    result = train(tiny_cfg(), tmp_path / "run")
    rows = read_csv(result.metrics_path)
    assert rows[0] == METRICS_COLUMNS
    assert len(rows) - 1 == result.iterations
    first = dict(zip(METRICS_COLUMNS, rows[1]))
    assert int(first["iter"]) == 1
    assert int(first["env_steps"]) == 40  # 2 episodes x horizon 20
    for col in ("L_policy", "L_guide", "L_MAG", "L_sparsity", "L_VAE_recon",
                "L_VAE_kl", "L_total"):
        assert first[col] != ""
    assert first["core_frozen"] in ("0", "1")


def test_zero_total_steps_writes_header_only(tmp_path):
    result = train(tiny_cfg(**{"train.total_steps": "0"}), tmp_path / "empty")
    rows = read_csv(result.metrics_path)
    assert rows == [METRICS_COLUMNS]
    assert result.iterations == 0


def test_trajectory_log_schema(tmp_path):
    result = train(tiny_cfg(), tmp_path / "run")
    rows = read_csv(result.trajectory_path)
    assert rows[0] == ["episode", "step", "s0", "s1", "s2", "s3", "s4", "s5",
                       "a0", "a1", "reward", "done"]
    assert len(rows) - 1 == result.env_steps
    assert rows[1][0] == "0" and rows[1][1] == "0"


def test_determinism_same_seed_same_fingerprint(tmp_path):
    a = train(tiny_cfg(), tmp_path / "a")
    b = train(tiny_cfg(), tmp_path / "b")
    assert metrics_fingerprint(a.metrics_path) == metrics_fingerprint(b.metrics_path)
    assert Path(a.trajectory_path).read_bytes() == Path(b.trajectory_path).read_bytes()
    ck_a = Path(a.checkpoint_paths[-1]).read_text()
    ck_b = Path(b.checkpoint_paths[-1]).read_text()
    assert ck_a == ck_b


def test_different_seed_changes_metrics(tmp_path):
    a = train(tiny_cfg(), tmp_path / "a")
    b = train(tiny_cfg(**{"train.seed": "1"}), tmp_path / "b")
    assert metrics_fingerprint(a.metrics_path) != metrics_fingerprint(b.metrics_path)


def test_zero_degree_equals_stationary_trajectory(tmp_path):
    a = train(tiny_cfg(**{"env.alpha_d": "0.0"}), tmp_path / "degree0")
    b = train(tiny_cfg(**{"env.alpha_d": "0.0", "env.mode": "stationary"}),
              tmp_path / "stationary")
    assert Path(a.trajectory_path).read_bytes() == Path(b.trajectory_path).read_bytes()


@pytest.mark.parametrize("variant", ["full", "no-corep", "no-vae", "no-guide",
                                     "no-sparsity", "no-mag", "single-gat",
                                     "ppo-only"])
def test_every_variant_trains(tmp_path, variant):
    result = train(tiny_cfg(**{"train.variant": variant,
                               "train.total_steps": "80"}), tmp_path / variant)
    assert result.env_steps >= 80
    rows = read_csv(result.metrics_path)
    first = dict(zip(METRICS_COLUMNS, rows[1]))
    if variant == "ppo-only":
        for col in ("L_guide", "L_MAG", "L_sparsity", "L_VAE_recon", "L_VAE_kl"):
            assert first[col] == ""
        assert first["core_frozen"] == ""
        assert first["L_total"] == first["L_policy"]
    if variant == "no-vae":
        assert first["L_VAE_recon"] == "" and first["L_VAE_kl"] == ""
        assert first["L_guide"] != ""
    if variant == "no-guide":
        assert first["L_guide"] == ""
        assert first["core_frozen"] == "0"
    if variant == "no-mag":
        assert first["L_MAG"] == ""
    if variant == "no-sparsity":
        assert first["L_sparsity"] == ""
    if variant == "single-gat":
        assert first["L_guide"] == "" and first["core_frozen"] == ""
        assert first["L_MAG"] != ""


def test_variant_model_parameter_groups():
    assert set(Model(tiny_cfg(), np.random.default_rng(0)).groups) == \
        {"featurizer", "core", "general", "encoder", "decoder"}
    assert set(Model(tiny_cfg(**{"train.variant": "ppo-only"}),
                     np.random.default_rng(0)).groups) == set()
    assert set(Model(tiny_cfg(**{"train.variant": "no-corep"}),
                     np.random.default_rng(0)).groups) == {"encoder", "decoder"}
    assert set(Model(tiny_cfg(**{"train.variant": "single-gat"}),
                     np.random.default_rng(0)).groups) == \
        {"featurizer", "general", "encoder", "decoder"}
    assert set(Model(tiny_cfg(**{"train.variant": "no-vae"}),
                     np.random.default_rng(0)).groups) == \
        {"featurizer", "core", "general", "encoder"}


@pytest.mark.parametrize("base", ["pendulum", "toy-causal"])
def test_other_base_envs_train(tmp_path, base):
    cfg = tiny_cfg(**{"env.base": base, "train.total_steps": "80"})
    result = train(cfg, tmp_path / base)
    assert result.env_steps >= 80
    header = read_csv(result.trajectory_path)[0]
    d_s = cfg.env.spec.d_s
    d_a = cfg.env.spec.d_a
    assert len(header) == 2 + d_s + d_a + 2


def test_multi_head_multi_layer_variant_trains(tmp_path):
    cfg = tiny_cfg(**{"corep.heads": "2", "corep.layers": "3",
                      "train.total_steps": "80"})
    result = train(cfg, tmp_path / "heads2")
    assert result.env_steps >= 80


def test_numerical_failure_aborts_with_component(tmp_path):
    cfg = tiny_cfg(**{"train.repr_lr": "1e40", "train.total_steps": "400"})
    with pytest.raises(TrainingAbort):
        train(cfg, tmp_path / "explode")


# ---------------------------------------------------------------------------
# freeze contract

def test_frozen_core_is_bit_identical_under_updates(tmp_path):
    # a huge confidence interval keeps the gate frozen after cold start
    cfg = tiny_cfg(**{"detector.eta": "1e9", "detector.capacity": "40",
                      "train.total_steps": "480"})
    result = train(cfg, tmp_path / "frozen")
    rows = read_csv(result.metrics_path)
    frozen_flags = [r[METRICS_COLUMNS.index("core_frozen")] for r in rows[1:]]
    assert frozen_flags[0] == "0"      # cold start: core updates
    assert "1" in frozen_flags         # gate engages once the buffer warms up
    assert all(f == "1" for f in frozen_flags[2:])

    # compare core-branch and featurizer parameters across frozen checkpoints
    mid = result.checkpoint_paths[1]
    final = result.checkpoint_paths[-1]
    _, state_mid = load_checkpoint(mid)
    _, state_final = load_checkpoint(final)
    for group in ("core", "featurizer"):
        for name in state_mid.groups[group]:
            assert np.array_equal(state_mid.groups[group][name],
                                  state_final.groups[group][name]), (group, name)
    # general branch kept training
    assert any(not np.array_equal(state_mid.groups["general"][n],
                                  state_final.groups["general"][n])
               for n in state_mid.groups["general"])
    # and the exported core adjacency is identical at a probe state
    probe = np.linspace(-0.5, 0.5, 6)
    core_mid, _ = export_graph(mid, probe, tmp_path / "export_mid")
    core_fin, _ = export_graph(final, probe, tmp_path / "export_fin")
    assert Path(core_mid).read_bytes() == Path(core_fin).read_bytes()


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_one_more_step_identical(tmp_path):
    cfg = tiny_cfg(**{"train.total_steps": "240", "train.checkpoint_every": "4"})
    full = train(cfg, tmp_path / "full")
    assert full.iterations == 6
    mid_ck = [p for p in full.checkpoint_paths if "000004" in p.name][0]

    cfg_more = tiny_cfg(**{"train.total_steps": "200", "train.checkpoint_every": "4"})
    with pytest.raises(ConfigError, match="does not match"):
        train(cfg_more, tmp_path / "resume_bad", resume_from=mid_ck)

    resumed = train(cfg, tmp_path / "resumed", resume_from=mid_ck)
    _, state_a = load_checkpoint(full.checkpoint_paths[-1])
    _, state_b = load_checkpoint(resumed.checkpoint_paths[-1])
    assert state_a.iteration == state_b.iteration == 6
    for group in state_a.groups:
        for name in state_a.groups[group]:
            assert np.array_equal(state_a.groups[group][name],
                                  state_b.groups[group][name]), (group, name)
    assert np.array_equal(state_a.td_values, state_b.td_values)
    assert state_a.rng_states == state_b.rng_states


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = tiny_cfg(**{"train.total_steps": "80"})
    result = train(cfg, tmp_path / "run")
    text = Path(result.checkpoint_paths[-1]).read_text()
    bad = tmp_path / "bad.txt"
    bad.write_text(text.replace("env.alpha_d = 1.0", "env.alpha_d = 0.5", 1))
    with pytest.raises(ConfigError, match="hash mismatch"):
        load_checkpoint(bad)


# ---------------------------------------------------------------------------
# exports

def test_export_graph_matches_model(tmp_path):
    cfg = tiny_cfg(**{"train.total_steps": "80"})
    result = train(cfg, tmp_path / "run")
    probe = np.linspace(-1, 1, 6)
    core_path, general_path = export_graph(result.checkpoint_paths[-1], probe,
                                           tmp_path / "export")
    a_core = np.loadtxt(core_path, delimiter=",")
    a_general = np.loadtxt(general_path, delimiter=",")
    assert a_core.shape == (3, 3) and a_general.shape == (3, 3)
    assert np.all(np.diag(a_core) == 0)
    assert np.all(np.abs(a_core.sum(axis=1) - 1) < 1e-6)  # 9 significant digits

    _, state = load_checkpoint(result.checkpoint_paths[-1])
    model = Model(cfg, np.random.default_rng(0))
    from corep.harness.training import _load_state_into
    _load_state_into(model, model.make_optimizers(), state)
    want_core, want_general = model.adjacency_pair(probe)
    assert np.allclose(a_core, want_core, atol=1e-8)
    assert np.allclose(a_general, want_general, atol=1e-8)

    # independent route: the stand-alone dual forward on the same parameters
    from corep.representation import DualGatParams, dual_forward
    gat = DualGatParams(featurizer=state.groups["featurizer"],
                        core=state.groups["core"],
                        general=state.groups["general"])
    oracle = dual_forward(probe, gat, cfg.corep)
    assert np.allclose(a_core, oracle["A_core"], atol=1e-8)
    assert np.allclose(a_general, oracle["A_general"], atol=1e-8)


def test_export_graph_dimension_mismatch(tmp_path):
    result = train(tiny_cfg(**{"train.total_steps": "80"}), tmp_path / "run")
    with pytest.raises(ConfigError, match="dimension"):
        export_graph(result.checkpoint_paths[-1], np.zeros(4), tmp_path / "x")


def test_export_graph_requires_dual_variant(tmp_path):
    result = train(tiny_cfg(**{"train.variant": "ppo-only",
                               "train.total_steps": "80"}), tmp_path / "run")
    with pytest.raises(ConfigError, match="no dual adjacency"):
        export_graph(result.checkpoint_paths[-1], np.zeros(6), tmp_path / "x")


# ---------------------------------------------------------------------------
# ablations and sweeps

def test_ablate_full_ratio_is_one(tmp_path):
    cfg = tiny_cfg(**{"train.total_steps": "80"})
    rows = ablate(cfg, ["full", "ppo-only"], tmp_path / "ablate")
    # common random numbers: both variants start the same episode
    first_full = read_csv(tmp_path / "ablate" / "full" / "trajectory.csv")[1]
    first_ppo = read_csv(tmp_path / "ablate" / "ppo-only" / "trajectory.csv")[1]
    assert first_full[2:8] == first_ppo[2:8]  # identical initial state draw
    table = {r["variant"]: r for r in rows}
    assert table["full"]["normalized"] == 1.0
    assert "ppo-only" in table
    assert (tmp_path / "ablate" / "ablation.csv").exists()


def test_ablate_rejects_unknown_variant(tmp_path):
    with pytest.raises(ConfigError, match="unknown variants"):
        ablate(tiny_cfg(), ["warp-drive"], tmp_path / "x")


def test_sweep_normalizes_to_unit_degree(tmp_path):
    cfg = tiny_cfg(**{"train.total_steps": "80"})
    rows = degree_sweep(cfg, [0.0, 1.0], tmp_path / "sweep")
    table = {r["degree"]: r for r in rows}
    assert table[1.0]["normalized"] == 1.0
    assert 0.0 in table


def test_sweep_rejects_empty_and_negative(tmp_path):
    with pytest.raises(ConfigError, match="at least one"):
        degree_sweep(tiny_cfg(), [], tmp_path / "x")
    with pytest.raises(ConfigError, match=">= 0"):
        degree_sweep(tiny_cfg(), [-1.0], tmp_path / "x")


# ---------------------------------------------------------------------------
# CLI

def write_tiny_config(tmp_path) -> Path:
    path = tmp_path / "tiny.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    return path


def test_cli_train_and_exit_codes(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    code = cli_main(["train", "--config", str(cfg_path),
                     "--set", "train.total_steps=80",
                     "--out", str(tmp_path / "out")])
    assert code == 0
    assert (tmp_path / "out" / "metrics.csv").exists()
    out = capsys.readouterr().out
    assert "final return" in out


def test_cli_config_error_exit_2(tmp_path):
    code = cli_main(["train", "--set", "env.base=marsrover",
                     "--out", str(tmp_path / "out")])
    assert code == 2


def test_cli_numerical_failure_exit_3(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    code = cli_main(["train", "--config", str(cfg_path),
                     "--set", "train.repr_lr=1e40",
                     "--set", "train.total_steps=400",
                     "--out", str(tmp_path / "out")])
    assert code == 3


def test_cli_graph_verify(capsys):
    assert cli_main(["graph-verify", "--families", "25", "--seed", "1"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_selfcheck(capsys):
    assert cli_main(["selfcheck", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert "worst over all ops" in out


def test_cli_graph_export(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    cli_main(["train", "--config", str(cfg_path), "--set", "train.total_steps=80",
              "--out", str(tmp_path / "out")])
    code = cli_main(["graph-export",
                     "--checkpoint", str(tmp_path / "out" / "checkpoint_final.txt"),
                     "--state", "0,0,0,0,0.5,0.5",
                     "--out", str(tmp_path / "export")])
    assert code == 0
    assert (tmp_path / "export" / "A_core.csv").exists()
    assert (tmp_path / "export" / "A_general.csv").exists()
