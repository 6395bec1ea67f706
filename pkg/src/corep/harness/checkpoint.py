"""Checkpoints: parameters, optimizer moments, rng streams, detector state.

A checkpoint is a single text file that embeds the full run configuration,
so tools can rebuild the model from the file alone.  Everything needed to
make `save -> load -> one update step` bit-identical to an uninterrupted
run is captured.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Adam, ParamGroup
from ..td_detect import TdBuffer
from .config import ConfigError, RunConfig, config_hash, config_to_text, \
    parse_config_text, run_config_from_mapping

FORMAT_TAG = "corep-checkpoint-v1"


@dataclass
class TrainState:
    iteration: int
    env_steps: int
    episode: int
    groups: dict[str, ParamGroup]
    adam_states: dict[str, ParamGroup]
    rng_states: dict[str, dict]
    td_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def save_checkpoint(path, cfg: RunConfig, state: TrainState) -> None:
    lines = [FORMAT_TAG,
             f"config-hash {config_hash(cfg)}",
             f"iteration {state.iteration}",
             f"env-steps {state.env_steps}",
             f"episode {state.episode}",
             "[config]",
             config_to_text(cfg).rstrip("\n"),
             "[endconfig]"]
    for name in sorted(state.groups):
        lines.append(f"[group {name}]")
        lines.append(state.groups[name].dumps().rstrip("\n"))
        lines.append("[endgroup]")
    for name in sorted(state.adam_states):
        lines.append(f"[adam {name}]")
        lines.append(state.adam_states[name].dumps().rstrip("\n"))
        lines.append("[endadam]")
    for name in sorted(state.rng_states):
        lines.append(f"[rng {name}]")
        lines.append(json.dumps(state.rng_states[name]))
        lines.append("[endrng]")
    lines.append("[tdbuffer]")
    lines.append(str(len(state.td_values)))
    lines.append(" ".join(repr(float(v)) for v in state.td_values))
    lines.append("[endtdbuffer]")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[RunConfig, TrainState]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ConfigError(f"{path}: not a {FORMAT_TAG} file")
    header: dict[str, str] = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("["):
        key, value = lines[idx].split(" ", 1)
        header[key] = value
        idx += 1

    sections: list[tuple[str, list[str]]] = []
    while idx < len(lines):
        line = lines[idx]
        if not line.startswith("["):
            raise ConfigError(f"{path}: expected a section header, got {line!r}")
        tag = line[1:-1]
        end = f"[end{tag.split(' ', 1)[0]}]"
        body: list[str] = []
        idx += 1
        while idx < len(lines) and lines[idx] != end:
            body.append(lines[idx])
            idx += 1
        if idx >= len(lines):
            raise ConfigError(f"{path}: unterminated section [{tag}]")
        sections.append((tag, body))
        idx += 1

    cfg: RunConfig | None = None
    groups: dict[str, ParamGroup] = {}
    adam_states: dict[str, ParamGroup] = {}
    rng_states: dict[str, dict] = {}
    td_values = np.zeros(0)
    for tag, body in sections:
        if tag == "config":
            cfg = run_config_from_mapping(parse_config_text("\n".join(body)))
        elif tag.startswith("group "):
            groups[tag.split(" ", 1)[1]] = ParamGroup.loads("\n".join(body))
        elif tag.startswith("adam "):
            adam_states[tag.split(" ", 1)[1]] = ParamGroup.loads("\n".join(body))
        elif tag.startswith("rng "):
            rng_states[tag.split(" ", 1)[1]] = json.loads(body[0])
        elif tag == "tdbuffer":
            count = int(body[0])
            td_values = (np.array([float(t) for t in body[1].split()])
                         if count else np.zeros(0))
            if len(td_values) != count:
                raise ConfigError(f"{path}: TD buffer expected {count} values")
        else:
            raise ConfigError(f"{path}: unknown section [{tag}]")
    if cfg is None:
        raise ConfigError(f"{path}: missing [config] section")
    if header.get("config-hash") != config_hash(cfg):
        raise ConfigError(f"{path}: config hash mismatch")
    state = TrainState(iteration=int(header["iteration"]),
                       env_steps=int(header["env-steps"]),
                       episode=int(header["episode"]),
                       groups=groups, adam_states=adam_states,
                       rng_states=rng_states, td_values=td_values)
    return cfg, state


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


def restore_td_buffer(values: np.ndarray, capacity: int) -> TdBuffer:
    buf = TdBuffer(capacity)
    for v in values:
        buf.push(float(v))
    return buf


def adam_from_state(opt: Adam, state: ParamGroup | None) -> Adam:
    if state is not None:
        opt.load_state_group(state)
    return opt
