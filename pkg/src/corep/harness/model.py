"""Variant-aware assembly of the representation stack and policy.

One Model owns every parameter group a variant needs, the cached expression
graphs for rolling out (latent per step) and for the end-to-end update pass
(total loss on a minibatch of states), and the freeze bookkeeping for the
core branch.

The update-pass graph stacks a minibatch block-diagonally: node features of
all states concatenate row-wise, and the adjacency/attention supports only
connect nodes of the same state, so every per-state quantity is computed
exactly as in the single-state graph while numpy sees a handful of larger
matrices instead of thousands of tiny ones.

Variant semantics:

* ``full``: dual branches, VAE, guide loss, TD gate.
* ``no-corep``: no graph stack at all; the VAE encodes the raw state.
* ``no-vae``: dual branches and gate, latent is the encoder mean path,
  no reconstruction or KL terms.
* ``no-guide``: dual branches and VAE, but no guide loss and no gate (the
  core branch updates continuously).
* ``no-sparsity`` / ``no-mag``: full minus the named regularizer.
* ``single-gat``: one always-updating branch, VAE, no guide loss, no gate.
* ``ppo-only``: the latent is zero; no representation parameters exist.
"""
from __future__ import annotations

import numpy as np

from .. import numerics as nm
from ..numerics import Adam, ParamGroup, const, var
from ..policy import Policy, build_ppo_loss, init_policy_params
from ..representation import (
    _neighbor_support,
    build_adjacency,
    build_branch,
    build_featurizer,
    build_vae,
    init_dual_gat_params,
    init_vae_params,
)
from .config import RunConfig

DUAL_VARIANTS = ("full", "no-vae", "no-guide", "no-sparsity", "no-mag")
GATED_VARIANTS = ("full", "no-vae", "no-sparsity", "no-mag")
FROZEN_GROUPS = ("featurizer", "core")   # freezing covers the shared featurizer


class Model:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.variant = cfg.variant
        corep = cfg.corep
        d_s = cfg.env.spec.d_s
        self.d_s = d_s
        self.d_h = corep.latent_dim
        self.groups: dict[str, ParamGroup] = {}
        self.core_frozen = False

        if self.has_branches:
            gat = init_dual_gat_params(corep, d_s, rng)
            self.groups["featurizer"] = gat.featurizer
            if self.is_dual:
                self.groups["core"] = gat.core
            self.groups["general"] = gat.general
        if self.has_encoder:
            vae = init_vae_params(corep, d_s, rng, input_dim=self.encoder_input_dim)
            self.groups["encoder"] = vae.encoder
            if self.has_vae:
                self.groups["decoder"] = vae.decoder

        pcfg = cfg.policy_config(d_obs=d_s + self.d_h)
        self.policy = Policy(pcfg, init_policy_params(pcfg, rng))

        self._latent_graph = self._build_latent_graph()
        self._joint_graphs: dict[int, dict] = {}

    # -- variant predicates --------------------------------------------------

    @property
    def is_dual(self) -> bool:
        return self.variant in DUAL_VARIANTS

    @property
    def has_branches(self) -> bool:
        return self.is_dual or self.variant == "single-gat"

    @property
    def has_encoder(self) -> bool:
        return self.variant != "ppo-only"

    @property
    def has_vae(self) -> bool:
        return self.variant not in ("no-vae", "ppo-only")

    @property
    def uses_gate(self) -> bool:
        return self.variant in GATED_VARIANTS

    @property
    def uses_guide(self) -> bool:
        return self.variant in ("full", "no-vae", "no-sparsity", "no-mag")

    @property
    def encoder_input_dim(self) -> int:
        corep = self.cfg.corep
        if self.variant == "no-corep":
            return self.d_s
        if self.variant == "single-gat":
            return corep.n_nodes * corep.graph_feat_dim
        return corep.n_nodes * corep.graph_width

    # -- graph assembly -------------------------------------------------------

    def _representation_nodes(self, s, batch: int):
        """Graph pieces shared by the latent and joint graphs."""
        corep = self.cfg.corep
        nodes = {}
        if self.has_branches:
            n = corep.n_nodes
            total = batch * n
            block = np.kron(np.eye(batch), np.ones((n, n))) - np.eye(total)
            block_mask = const(block)
            x = build_featurizer(s, corep, batch_size=batch)
            a_x = build_adjacency(x, n, support=block_mask)
            support = _neighbor_support(a_x, block_mask, corep.tau)
            g_general, a_general = build_branch(x, support, "general", corep,
                                                n_total=total)
            nodes["A_general"] = a_general
            if self.is_dual:
                g_core, a_core = build_branch(x, support, "core", corep,
                                              n_total=total)
                nodes["A_core"] = a_core
                nodes["G"] = nm.concat(g_core, g_general, axis=1)
            else:
                nodes["G"] = g_general
        elif self.variant == "no-corep":
            nodes["G"] = s
        return nodes

    def _encode(self, nodes, s, noise, batch: int):
        if not self.has_encoder:
            return None
        vae = build_vae(nodes["G"], s, noise, self.cfg.corep,
                        input_dim=self.encoder_input_dim, batch_size=batch)
        if not self.has_vae:
            vae["h"] = vae["mu"]   # deterministic mean path, no decoder terms
        return vae

    def _build_latent_graph(self):
        if self.variant == "ppo-only":
            return None
        s = var("s")
        noise = var("noise")
        nodes = self._representation_nodes(s, batch=1)
        vae = self._encode(nodes, s, noise, batch=1)
        return {"h": vae["h"], "nodes": nodes}

    def _per_state_frobenius_mean(self, diff, batch: int):
        """Mean over stacked states of each block's Frobenius norm."""
        n = self.cfg.corep.n_nodes
        selector = const(np.kron(np.eye(batch), np.ones((1, n))))
        squares = nm.reduce_sum(nm.mul(diff, diff), axis=1)
        per_state = nm.sqrt(selector @ squares)
        return nm.reduce_mean(per_state)

    def _build_joint_graph(self, batch: int) -> dict:
        """Total loss over a stacked minibatch, per-state means throughout."""
        corep = self.cfg.corep
        s = var("s")
        noise = var("noise")
        nodes = self._representation_nodes(s, batch)
        vae = self._encode(nodes, s, noise, batch)
        obs = nm.concat(s, vae["h"], axis=1)
        ppo = build_ppo_loss(obs, var("action"), var("old_logp"), var("adv"),
                             var("ret"), self.policy.cfg)
        parts: dict[str, nm.DiffNode] = {"policy": ppo["loss"]}
        reg_terms = []
        if self.is_dual and self.uses_guide:
            parts["guide"] = self._per_state_frobenius_mean(
                nm.sub(nodes["A_core"], nodes["A_general"]), batch)
        adjacencies = []
        if self.is_dual:
            adjacencies = [nodes["A_core"], nodes["A_general"]]
        elif self.variant == "single-gat":
            adjacencies = [nodes["A_general"]]
        if adjacencies and self.variant != "no-mag":
            mag = [self._per_state_frobenius_mean(nm.sub(a, nm.transpose(a)), batch)
                   for a in adjacencies]
            parts["mag"] = mag[0] if len(mag) == 1 else nm.add(mag[0], mag[1])
            reg_terms.append(parts["mag"])
        if adjacencies and self.variant != "no-sparsity":
            sp = [nm.mul(const(1.0 / batch), nm.l1_norm(a)) for a in adjacencies]
            parts["sparsity"] = sp[0] if len(sp) == 1 else nm.add(sp[0], sp[1])
            reg_terms.append(parts["sparsity"])
        if self.has_vae:
            parts["recon"] = vae["recon"]
            parts["kl"] = vae["kl"]
            reg_terms.append(nm.add(vae["recon"], vae["kl"]))
        total = ppo["loss"]
        if "guide" in parts:
            total = nm.add(total, nm.mul(const(corep.lambda_guide), parts["guide"]))
        if reg_terms:
            reg = reg_terms[0]
            for term in reg_terms[1:]:
                reg = nm.add(reg, term)
            total = nm.add(total, nm.mul(const(corep.lambda_reg), reg))
        parts["total"] = total
        return parts

    # -- bindings and evaluation ----------------------------------------------

    def repr_bindings(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for group in self.groups.values():
            out.update(group)
        return out

    def latent(self, s: np.ndarray, noise: np.ndarray | None) -> np.ndarray:
        """Latent vector for one state (zeros for the ppo-only variant)."""
        if self._latent_graph is None:
            return np.zeros(self.d_h)
        bindings = self.repr_bindings()
        bindings["s"] = np.asarray(s, dtype=np.float64).reshape(1, -1)
        bindings["noise"] = (np.zeros((1, self.d_h)) if noise is None
                             else np.asarray(noise, dtype=np.float64).reshape(1, -1))
        return nm.evaluate(self._latent_graph["h"], bindings).reshape(-1)

    def adjacency_pair(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Core and general adjacency at a probe state (dual variants only)."""
        if not self.is_dual:
            raise ValueError(f"variant '{self.variant}' has no dual adjacency pair")
        bindings = self.repr_bindings()
        bindings["s"] = np.asarray(s, dtype=np.float64).reshape(1, -1)
        bindings["noise"] = np.zeros((1, self.d_h))
        nodes = self._latent_graph["nodes"]
        a_core = nm.evaluate(nodes["A_core"], bindings).copy()
        a_general = nm.evaluate(nodes["A_general"], bindings).copy()
        return a_core, a_general

    def trainable_names(self) -> list[str]:
        """Representation + policy parameters eligible for the joint update."""
        names: list[str] = []
        for group_name, group in self.groups.items():
            if self.core_frozen and group_name in FROZEN_GROUPS:
                continue
            names.extend(group.trainable_names())
        names.extend(self.policy.params.trainable_names())
        return names

    def joint_loss_parts(self, batch: int = 1) -> dict | None:
        if self.variant == "ppo-only":
            return None
        if batch not in self._joint_graphs:
            self._joint_graphs[batch] = self._build_joint_graph(batch)
        return self._joint_graphs[batch]

    def make_optimizers(self) -> dict[str, Adam]:
        opts = {name: Adam(group, lr=self.cfg.repr_lr)
                for name, group in self.groups.items()}
        opts["policy"] = Adam(self.policy.params, lr=self.cfg.policy_lr)
        return opts
