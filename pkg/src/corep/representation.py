"""Dual graph-attention state representation with a VAE head.

The stack turns a state vector into node features through a shared MLP,
derives a row-stochastic weighted adjacency from node similarities, runs
two identically-shaped attention branches over it (a slowly-updated core
branch and a continuously-updated general branch), concatenates their node
outputs into the graph representation G(s), and feeds that through a
variational autoencoder to produce the latent given to the policy.

Branch adjacencies are the final attention layer's coefficient matrices
(averaged over heads).  The regularizers defined here pull the two
adjacencies together, penalize asymmetry, and encourage sparsity.

All functions build expression graphs over the :mod:`corep.numerics`
engine; the public operations evaluate small throwaway graphs, while the
training harness caches larger composites.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .numerics import DiffNode, NumericsError, ParamGroup, const, var

LEAKY_SLOPE = 0.2
LOG_SIGMA_BOUNDS = (-10.0, 10.0)


class CorepError(Exception):
    pass


@dataclass(frozen=True)
class CorepConfig:
    """Shape and loss-weight configuration for the representation stack."""

    n_nodes: int = 4
    node_feat_dim: int = 4        # features per node after the featurizer
    graph_feat_dim: int = 8       # per-branch node output width
    latent_dim: int = 4
    layers: int = 2
    heads: int = 1
    neighbor_threshold: float | None = None   # default: half the uniform weight
    lambda_guide: float = 0.1
    lambda_reg: float = 1e-3
    feat_hidden: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 64

    def __post_init__(self):
        for name in ("n_nodes", "node_feat_dim", "graph_feat_dim", "latent_dim",
                     "layers", "heads", "feat_hidden", "enc_hidden", "dec_hidden"):
            if getattr(self, name) < 1:
                raise CorepError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.neighbor_threshold is not None and not 0.0 <= self.neighbor_threshold < 1.0:
            raise CorepError(f"neighbor_threshold must be in [0, 1), "
                             f"got {self.neighbor_threshold}")
        if self.lambda_guide < 0 or self.lambda_reg < 0:
            raise CorepError("loss weights must be >= 0")

    @property
    def tau(self) -> float:
        if self.neighbor_threshold is not None:
            return self.neighbor_threshold
        if self.n_nodes < 2:
            return 0.0
        return 1.0 / (2.0 * (self.n_nodes - 1))

    @property
    def graph_width(self) -> int:
        """Feature width of G(s): both branch outputs concatenated."""
        return 2 * self.graph_feat_dim


@dataclass
class DualGatParams:
    """Shared featurizer plus the two identically-shaped branch groups."""

    featurizer: ParamGroup
    core: ParamGroup
    general: ParamGroup
    core_frozen: bool = False

    def __post_init__(self):
        core_shapes = {n.split(".", 1)[1]: self.core[n].shape for n in self.core}
        gen_shapes = {n.split(".", 1)[1]: self.general[n].shape for n in self.general}
        if core_shapes != gen_shapes:
            raise CorepError("core and general branches must be identically shaped")


@dataclass
class VaeParams:
    encoder: ParamGroup
    decoder: ParamGroup


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_dual_gat_params(cfg: CorepConfig, d_s: int,
                         rng: np.random.Generator) -> DualGatParams:
    feat = ParamGroup()
    feat.add("feat.w1", _xavier(rng, d_s, cfg.feat_hidden, (d_s, cfg.feat_hidden)))
    feat.add("feat.b1", np.zeros((1, cfg.feat_hidden)))
    out_dim = cfg.n_nodes * cfg.node_feat_dim
    feat.add("feat.w2", _xavier(rng, cfg.feat_hidden, out_dim, (cfg.feat_hidden, out_dim)))
    feat.add("feat.b2", np.zeros((1, out_dim)))

    def branch(prefix: str) -> ParamGroup:
        group = ParamGroup()
        for layer in range(cfg.layers):
            d_in = cfg.node_feat_dim if layer == 0 else cfg.graph_feat_dim
            group.add(f"{prefix}.l{layer}.W",
                      _xavier(rng, d_in, cfg.graph_feat_dim, (d_in, cfg.graph_feat_dim)))
            for head in range(cfg.heads):
                group.add(f"{prefix}.l{layer}.h{head}.attn",
                          _xavier(rng, 2 * cfg.graph_feat_dim, 1,
                                  (2 * cfg.graph_feat_dim, 1)))
        return group

    return DualGatParams(featurizer=feat, core=branch("core"), general=branch("general"))


def init_vae_params(cfg: CorepConfig, d_s: int, rng: np.random.Generator,
                    input_dim: int | None = None) -> VaeParams:
    """Encoder/decoder parameters; ``input_dim`` defaults to the width of G(s)."""
    d_in = input_dim if input_dim is not None else cfg.n_nodes * cfg.graph_width
    enc = ParamGroup()
    enc.add("enc.w1", _xavier(rng, d_in, cfg.enc_hidden, (d_in, cfg.enc_hidden)))
    enc.add("enc.b1", np.zeros((1, cfg.enc_hidden)))
    enc.add("enc.mu_w", _xavier(rng, cfg.enc_hidden, cfg.latent_dim,
                                (cfg.enc_hidden, cfg.latent_dim)))
    enc.add("enc.mu_b", np.zeros((1, cfg.latent_dim)))
    enc.add("enc.ls_w", _xavier(rng, cfg.enc_hidden, cfg.latent_dim,
                                (cfg.enc_hidden, cfg.latent_dim)))
    enc.add("enc.ls_b", np.zeros((1, cfg.latent_dim)))
    dec = ParamGroup()
    dec.add("dec.w1", _xavier(rng, cfg.latent_dim, cfg.dec_hidden,
                              (cfg.latent_dim, cfg.dec_hidden)))
    dec.add("dec.b1", np.zeros((1, cfg.dec_hidden)))
    dec.add("dec.w2", _xavier(rng, cfg.dec_hidden, d_s, (cfg.dec_hidden, d_s)))
    dec.add("dec.b2", np.zeros((1, d_s)))
    return VaeParams(encoder=enc, decoder=dec)


# ---------------------------------------------------------------------------
# graph builders (symbolic; leaves are `var` nodes named after parameters)

def build_featurizer(s: DiffNode, cfg: CorepConfig, batch_size: int = 1) -> DiffNode:
    """State rows (batch, d_s) to stacked node features (batch * N, d_f)."""
    hidden = nm.relu(nm.add_rowvec(s @ var("feat.w1"), var("feat.b1")))
    flat = nm.add_rowvec(hidden @ var("feat.w2"), var("feat.b2"))
    return nm.reshape(flat, (batch_size * cfg.n_nodes, cfg.node_feat_dim))


def build_adjacency(x: DiffNode, n_nodes: int,
                    support: DiffNode | None = None) -> DiffNode:
    """Row-softmax of the node Gram matrix over off-diagonal entries only.

    The diagonal is excluded from the softmax support (not merely zeroed
    after it), so each row is a distribution over the other nodes and the
    diagonal is exactly zero.  A custom 0/1 ``support`` (e.g. the
    block-diagonal pattern of several stacked states) may replace the
    plain off-diagonal mask.
    """
    if n_nodes < 2:
        raise CorepError(f"weighted adjacency needs at least 2 nodes, got {n_nodes}")
    gram = x @ nm.transpose(x)
    if support is None:
        support = const(np.ones((n_nodes, n_nodes)) - np.eye(n_nodes))
    return nm.row_softmax(gram, support)


def _neighbor_support(a_x: DiffNode, base_mask: DiffNode, tau: float) -> DiffNode:
    return nm.mul(nm.ge_mask(a_x, tau), base_mask)


def off_diagonal_mask(n_nodes: int) -> DiffNode:
    return const(np.ones((n_nodes, n_nodes)) - np.eye(n_nodes))


def build_gat_layer(h_in: DiffNode, weight: DiffNode, attn_vectors: Sequence[DiffNode],
                    support: DiffNode, n_nodes: int,
                    d_g: int) -> tuple[DiffNode, DiffNode]:
    """One masked attention layer; returns head-averaged outputs and weights.

    Attention logits follow the additive form: project nodes with the layer
    weight, score ordered pairs with a per-head vector over the
    concatenated pair features, pass through a leaky rectifier, and
    normalize per row over the neighbor support.  Node outputs aggregate
    projected neighbors by attention weight through an ELU.
    """
    z = h_in @ weight
    sel_left = const(np.hstack([np.eye(d_g), np.zeros((d_g, d_g))]))
    sel_right = const(np.hstack([np.zeros((d_g, d_g)), np.eye(d_g)]))
    ones_row = const(np.ones((1, n_nodes)))
    ones_col = const(np.ones((n_nodes, 1)))
    outs, alphas = [], []
    for attn in attn_vectors:
        u = z @ (sel_left @ attn)       # (N, 1): score of each node as source
        v = z @ (sel_right @ attn)      # (N, 1): score of each node as target
        logits = nm.leaky_relu(nm.add(u @ ones_row, ones_col @ nm.transpose(v)),
                               LEAKY_SLOPE)
        alpha = nm.row_softmax(logits, support)
        outs.append(nm.elu(alpha @ z))
        alphas.append(alpha)
    h_out, alpha_avg = outs[0], alphas[0]
    for o, a in zip(outs[1:], alphas[1:]):
        h_out = nm.add(h_out, o)
        alpha_avg = nm.add(alpha_avg, a)
    if len(outs) > 1:
        scale = const(1.0 / len(outs))
        h_out = nm.mul(scale, h_out)
        alpha_avg = nm.mul(scale, alpha_avg)
    return h_out, alpha_avg


def build_branch(x: DiffNode, support: DiffNode, prefix: str, cfg: CorepConfig,
                 n_total: int | None = None) -> tuple[DiffNode, DiffNode]:
    """Stack the configured number of attention layers for one branch.

    ``n_total`` overrides the node count when several states are stacked
    block-diagonally (it is then batch * n_nodes).
    """
    n = n_total if n_total is not None else cfg.n_nodes
    h = x
    alpha = None
    for layer in range(cfg.layers):
        weight = var(f"{prefix}.l{layer}.W")
        attns = [var(f"{prefix}.l{layer}.h{head}.attn") for head in range(cfg.heads)]
        h, alpha = build_gat_layer(h, weight, attns, support, n, cfg.graph_feat_dim)
    return h, alpha


def build_dual(s: DiffNode, cfg: CorepConfig) -> dict[str, DiffNode]:
    """Shared featurizer and adjacency feeding both attention branches."""
    x = build_featurizer(s, cfg)
    a_x = build_adjacency(x, cfg.n_nodes)
    support = _neighbor_support(a_x, off_diagonal_mask(cfg.n_nodes), cfg.tau)
    g_core, a_core = build_branch(x, support, "core", cfg)
    g_general, a_general = build_branch(x, support, "general", cfg)
    return {
        "X": x,
        "A_X": a_x,
        "G_core": g_core,
        "G_general": g_general,
        "A_core": a_core,
        "A_general": a_general,
        "G": nm.concat(g_core, g_general, axis=1),
    }


def build_vae(g: DiffNode, s: DiffNode, noise: DiffNode, cfg: CorepConfig,
              input_dim: int | None = None, batch_size: int = 1) -> dict[str, DiffNode]:
    """Encode G(s) to a latent Gaussian, decode back to the state.

    Returns the sampled latent, the reconstruction, the mean reconstruction
    error against ``s`` and the closed-form KL against a standard normal.
    The log-scale is clamped before exponentiation so the KL stays finite.
    With ``batch_size`` stacked states, the reconstruction and KL terms are
    per-state means.
    """
    d_in = input_dim if input_dim is not None else cfg.n_nodes * cfg.graph_width
    flat = nm.reshape(g, (batch_size, d_in))
    hidden = nm.relu(nm.add_rowvec(flat @ var("enc.w1"), var("enc.b1")))
    mu = nm.add_rowvec(hidden @ var("enc.mu_w"), var("enc.mu_b"))
    log_sigma = nm.clip(nm.add_rowvec(hidden @ var("enc.ls_w"), var("enc.ls_b")),
                        *LOG_SIGMA_BOUNDS)
    h = nm.reparam_gaussian(mu, log_sigma, noise)
    dec_hidden = nm.relu(nm.add_rowvec(h @ var("dec.w1"), var("dec.b1")))
    s_hat = nm.add_rowvec(dec_hidden @ var("dec.w2"), var("dec.b2"))
    diff = nm.sub(s, s_hat)
    recon = nm.reduce_mean(nm.mul(diff, diff))
    sigma_sq = nm.exp(nm.mul(const(2.0), log_sigma))
    kl = nm.mul(const(0.5 / batch_size),
                nm.reduce_sum(nm.mul(mu, mu) + sigma_sq - const(1.0)
                              - nm.mul(const(2.0), log_sigma)))
    return {"mu": mu, "log_sigma": log_sigma, "h": h, "s_hat": s_hat,
            "recon": recon, "kl": kl}


def build_losses(a_core: DiffNode, a_general: DiffNode,
                 recon: DiffNode | None, kl: DiffNode | None,
                 l_policy: DiffNode, lambda_guide: float,
                 lambda_reg: float) -> dict[str, DiffNode]:
    """Combine policy, guide, structure and VAE terms into the total cost.

    Guide: Frobenius distance between the branch adjacencies.  Structure:
    Frobenius asymmetry of each adjacency.  Sparsity: entrywise L1 of each.
    Every component enters as a cost to be minimized.
    """
    guide = nm.frobenius_norm(nm.sub(a_core, a_general))
    mag = nm.add(nm.frobenius_norm(nm.sub(a_core, nm.transpose(a_core))),
                 nm.frobenius_norm(nm.sub(a_general, nm.transpose(a_general))))
    sparsity = nm.add(nm.l1_norm(a_core), nm.l1_norm(a_general))
    reg = nm.add(mag, sparsity)
    parts = {"guide": guide, "mag": mag, "sparsity": sparsity}
    if recon is not None:
        vae = nm.add(recon, kl)
        reg = nm.add(reg, vae)
        parts["vae"] = vae
    total = nm.add(l_policy,
                   nm.add(nm.mul(const(lambda_guide), guide),
                          nm.mul(const(lambda_reg), reg)))
    parts["total"] = total
    return parts


# ---------------------------------------------------------------------------
# value-level operations (thin wrappers used directly by tests and tools)

def _row(vec: np.ndarray) -> np.ndarray:
    a = np.asarray(vec, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def state_to_nodes(s: np.ndarray, featurizer: Mapping[str, np.ndarray],
                   cfg: CorepConfig) -> np.ndarray:
    """Featurize one state into the (N, d_f) node matrix."""
    s = _row(s)
    graph = build_featurizer(var("s"), cfg)
    return nm.evaluate(graph, {**dict(featurizer), "s": s})


def weighted_adjacency(x: np.ndarray) -> np.ndarray:
    """Row-stochastic adjacency of a node feature matrix (zero diagonal)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise CorepError(f"weighted_adjacency needs an (N>=2, d_f) matrix, "
                         f"got shape {x.shape}")
    return nm.evaluate(build_adjacency(const(x), x.shape[0]))


def gat_layer(h_in: np.ndarray, weight: np.ndarray, attn: np.ndarray,
              a_x: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention layer on explicit arrays."""
    h_in = np.asarray(h_in, dtype=np.float64)
    n, d_g = h_in.shape[0], np.asarray(weight).shape[1]
    support = _neighbor_support(const(a_x), off_diagonal_mask(n), tau)
    out, alpha = build_gat_layer(const(h_in), const(weight),
                                 [const(np.asarray(attn).reshape(2 * d_g, 1))],
                                 support, n, d_g)
    try:
        return nm.evaluate(out), alpha.value
    except NumericsError as err:
        if "empty support" in str(err):
            raise CorepError(f"{err} (neighbor threshold tau={tau})") from err
        raise


def dual_forward(s: np.ndarray, params: DualGatParams,
                 cfg: CorepConfig) -> dict[str, np.ndarray]:
    """Evaluate both branches on one state; returns arrays keyed like build_dual."""
    graph = build_dual(var("s"), cfg)
    bindings = nm.merge_bindings(params.featurizer, params.core, params.general)
    bindings["s"] = _row(s)
    # head-averaged adjacency nodes hang off to the side of G, so evaluate
    # every requested root (evaluation is pure; shared work is identical)
    return {k: nm.evaluate(node, bindings).copy() for k, node in graph.items()}


def vae_heads(g: np.ndarray, vae_params: VaeParams, noise: np.ndarray,
              s: np.ndarray, cfg: CorepConfig) -> dict[str, np.ndarray | float]:
    """Sample the latent for G(s) and return reconstruction and KL parts."""
    g = np.asarray(g, dtype=np.float64)
    graph = build_vae(const(g), var("s"), var("noise"), cfg, input_dim=g.size)
    bindings = nm.merge_bindings(vae_params.encoder, vae_params.decoder)
    bindings["s"] = _row(s)
    bindings["noise"] = _row(noise)
    nm.evaluate(graph["kl"], bindings)
    nm.evaluate(graph["recon"], bindings)
    return {
        "h": graph["h"].value.copy(),
        "s_hat": graph["s_hat"].value.copy(),
        "mu": graph["mu"].value.copy(),
        "sigma": np.exp(graph["log_sigma"].value.copy()),
        "recon": float(graph["recon"].value),
        "kl": float(graph["kl"].value),
    }


def losses(a_core: np.ndarray, a_general: np.ndarray,
           vae_parts: tuple[float, float] | None, l_policy: float,
           lambda_guide: float, lambda_reg: float) -> dict[str, float]:
    """Loss components on explicit arrays; VAE parts are (recon, kl) or None."""
    recon = const(float(vae_parts[0])) if vae_parts is not None else None
    kl = const(float(vae_parts[1])) if vae_parts is not None else None
    parts = build_losses(const(a_core), const(a_general), recon, kl,
                         const(float(l_policy)), lambda_guide, lambda_reg)
    return {name: float(nm.evaluate(node)) for name, node in parts.items()}
