"""Mixed causal graphs: DAG-to-MAG construction, union graphs, m-separation.

A :class:`MixedGraph` holds directed and bidirected edges over a fixed node
list and represents both DAGs (empty bidirected set) and maximal ancestral
graphs.  The module also models families of stationary sub-environments:
per-environment binary masks over state/hidden/action blocks induce one DAG
per environment (plus a latent environment-label node), and the edgewise
union of the derived ancestral graphs is the structure the learned
representation is meant to stay close to.

Everything here is exact and enumeration-based; graphs are capped at
:data:`MAX_NODES` nodes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_NODES = 20


class GraphError(Exception):
    pass


def _canonical_pair(u: str, v: str, index: dict[str, int]) -> tuple[str, str]:
    return (u, v) if index[u] <= index[v] else (v, u)


@dataclass(frozen=True)
class MixedGraph:
    """Node list plus directed (u -> v) and bidirected (u <-> v) edge sets.

    Bidirected pairs are stored canonically ordered by node position.  No
    self-loops; a pair may not carry both a directed and a bidirected edge.
    """

    nodes: tuple[str, ...]
    directed: frozenset[tuple[str, str]] = frozenset()
    bidirected: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise GraphError("node labels must be unique")
        if len(self.nodes) > MAX_NODES:
            raise GraphError(f"graph has {len(self.nodes)} nodes; limit is {MAX_NODES}")
        index = {n: i for i, n in enumerate(self.nodes)}
        for u, v in self.directed:
            if u == v:
                raise GraphError(f"self-loop {u} -> {v}")
            if u not in index or v not in index:
                raise GraphError(f"edge {u} -> {v} uses unknown node")
        canon = set()
        for u, v in self.bidirected:
            if u == v:
                raise GraphError(f"self-loop {u} <-> {v}")
            if u not in index or v not in index:
                raise GraphError(f"edge {u} <-> {v} uses unknown node")
            canon.add(_canonical_pair(u, v, index))
        object.__setattr__(self, "bidirected", frozenset(canon))
        undirected_pairs = {frozenset(p) for p in self.bidirected}
        for u, v in self.directed:
            if frozenset((u, v)) in undirected_pairs:
                raise GraphError(f"pair ({u}, {v}) has both a directed and a bidirected edge")

    @classmethod
    def from_edges(cls, nodes: Sequence[str],
                   directed: Iterable[tuple[str, str]] = (),
                   bidirected: Iterable[tuple[str, str]] = ()) -> "MixedGraph":
        return cls(tuple(nodes), frozenset(directed), frozenset(bidirected))

    def children(self, node: str) -> set[str]:
        return {v for u, v in self.directed if u == node}

    def parents(self, node: str) -> set[str]:
        return {u for u, v in self.directed if v == node}

    def has_edge(self, u: str, v: str) -> bool:
        index = {n: i for i, n in enumerate(self.nodes)}
        return ((u, v) in self.directed or (v, u) in self.directed
                or _canonical_pair(u, v, index) in self.bidirected)

    def is_dag(self) -> bool:
        return not self.bidirected and _acyclic(self)


def _children_map(g: MixedGraph) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {n: [] for n in g.nodes}
    for u, v in g.directed:
        out[u].append(v)
    return out


def _acyclic(g: MixedGraph) -> bool:
    children = _children_map(g)
    state: dict[str, int] = {}  # 0 visiting, 1 done

    def visit(n: str) -> bool:
        state[n] = 0
        for c in children[n]:
            s = state.get(c)
            if s == 0:
                return False
            if s is None and not visit(c):
                return False
        state[n] = 1
        return True

    return all(visit(n) for n in g.nodes if n not in state)


def ancestors(g: MixedGraph, node: str) -> set[str]:
    """Strict ancestors: nodes with a directed path of length >= 1 to ``node``."""
    parents: dict[str, set[str]] = {n: set() for n in g.nodes}
    for u, v in g.directed:
        parents[v].add(u)
    out: set[str] = set()
    frontier = list(parents[node])
    while frontier:
        n = frontier.pop()
        if n in out:
            continue
        out.add(n)
        frontier.extend(parents[n])
    return out


def _ancestor_map(g: MixedGraph) -> dict[str, set[str]]:
    parents: dict[str, list[str]] = {n: [] for n in g.nodes}
    for u, v in g.directed:
        parents[v].append(u)
    out: dict[str, set[str]] = {}
    for node in g.nodes:
        seen: set[str] = set()
        frontier = list(parents[node])
        while frontier:
            n = frontier.pop()
            if n not in seen:
                seen.add(n)
                frontier.extend(parents[n])
        out[node] = seen
    return out


def dag_to_mag(dag: MixedGraph, latent: str) -> MixedGraph:
    """Marginalize one latent root out of a DAG, yielding an ancestral graph.

    Three rules, applied in order over the original DAG:
      1. every pair of children of the latent becomes bidirected;
      2. for any t -> u in the DAG with u <-> v added and u an ancestor of v,
         add t -> v;
      3. a bidirected u <-> v with u an ancestor of v becomes u -> v.
    All original directed edges among the retained nodes are kept and the
    latent node is dropped from the output.
    """
    if dag.bidirected:
        raise GraphError("dag_to_mag: input must be a DAG (no bidirected edges)")
    if not _acyclic(dag):
        raise GraphError("dag_to_mag: input graph is cyclic")
    if latent not in dag.nodes:
        raise GraphError(f"dag_to_mag: latent node '{latent}' not in graph")
    if dag.parents(latent):
        raise GraphError(f"dag_to_mag: latent node '{latent}' must have in-degree 0")

    anc = _ancestor_map(dag)
    kept = tuple(n for n in dag.nodes if n != latent)
    index = {n: i for i, n in enumerate(kept)}
    directed = {(u, v) for u, v in dag.directed if u != latent and v != latent}

    kids = sorted(dag.children(latent), key=index.get)
    bidirected = {_canonical_pair(u, v, index)
                  for u, v in itertools.combinations(kids, 2)}

    # rule 2: parents of one confounded twin point at the other
    for t, u in list(dag.directed):
        if t == latent:
            continue
        for p, q in bidirected:
            for a, b in ((p, q), (q, p)):
                if u == a and a in anc[b] and t != b:
                    directed.add((t, b))

    # rule 3: ancestry resolves a bidirected edge into a directed one
    resolved = set()
    for p, q in bidirected:
        if p in anc[q]:
            directed.add((p, q))
            resolved.add((p, q))
        elif q in anc[p]:
            directed.add((q, p))
            resolved.add((p, q))
    bidirected -= resolved

    return MixedGraph(kept, frozenset(directed), frozenset(bidirected))


def union_mags(mags: Sequence[MixedGraph]) -> MixedGraph:
    """Edgewise union of ancestral graphs over an identical node list."""
    if not mags:
        raise GraphError("union_mags: need at least one graph")
    nodes = mags[0].nodes
    for g in mags[1:]:
        if g.nodes != nodes:
            raise GraphError(f"union_mags: node lists differ: {nodes} vs {g.nodes}")
    directed = frozenset().union(*(g.directed for g in mags))
    bidirected = frozenset().union(*(g.bidirected for g in mags))
    return MixedGraph(nodes, directed, bidirected)


# ---------------------------------------------------------------------------
# m-separation by path enumeration

def _adjacency(g: MixedGraph) -> dict[str, list[tuple[str, bool, bool]]]:
    """Per node: (neighbor, arrowhead at this side, arrowhead at neighbor side)."""
    adj: dict[str, list[tuple[str, bool, bool]]] = {n: [] for n in g.nodes}
    for u, v in sorted(g.directed):
        adj[u].append((v, False, True))
        adj[v].append((u, True, False))
    for u, v in sorted(g.bidirected):
        adj[u].append((v, True, True))
        adj[v].append((u, True, True))
    return adj


def _connecting_walk_exists(adj: dict[str, list[tuple[str, bool, bool]]],
                            xs: set[str], ys: set[str], zs: set[str],
                            open_collider: set[str]) -> bool:
    """Reachability over (node, arrived-with-arrowhead) states.

    A step out of an internal node applies the block rule: a collider
    (arrowheads on both sides) passes only when it is in ``open_collider``,
    a non-collider passes only when it is outside Z.  Walk-based and
    path-based m-connection coincide for mixed graphs, so this decides the
    path criterion exactly (cross-checked in the test suite against a
    literal path enumerator).
    """
    seen: set[tuple[str, bool]] = set()
    frontier: list[tuple[str, bool]] = []
    for x in sorted(xs):
        for nxt, _, head_next in adj[x]:
            if nxt in ys:
                return True
            state = (nxt, head_next)
            if nxt not in xs and state not in seen:
                seen.add(state)
                frontier.append(state)
    while frontier:
        node, head_in = frontier.pop()
        for nxt, head_here, head_next in adj[node]:
            if head_in and head_here:
                if node not in open_collider:
                    continue
            elif node in zs:
                continue
            if nxt in ys:
                return True
            state = (nxt, head_next)
            if nxt not in xs and state not in seen:
                seen.add(state)
                frontier.append(state)
    return False


def m_separated(g: MixedGraph, x: Iterable[str], y: Iterable[str],
                z: Iterable[str]) -> bool:
    """True iff every path between the sets X and Y is blocked given Z.

    A path is blocked at an internal node m when m is a non-collider in Z,
    or a collider such that neither m nor any descendant of m is in Z.
    """
    xs, ys, zs = set(x), set(y), set(z)
    for name, s in (("X", xs), ("Y", ys), ("Z", zs)):
        unknown = s - set(g.nodes)
        if unknown:
            raise GraphError(f"m_separated: {name} contains unknown nodes {sorted(unknown)}")
    if xs & ys or xs & zs or ys & zs:
        raise GraphError("m_separated: X, Y, Z must be pairwise disjoint")

    # a collider stays open when it, or a descendant of it, is conditioned on;
    # "has a descendant in Z" is the same as "is an ancestor of some z"
    open_collider = set(zs)
    for zn in zs:
        open_collider |= ancestors(g, zn)

    return not _connecting_walk_exists(_adjacency(g), xs, ys, zs, open_collider)


# ---------------------------------------------------------------------------
# MAG verification

@dataclass(frozen=True)
class MagReport:
    ancestral: bool
    maximal: bool
    witness: tuple[str, str] | None = None

    def ok(self) -> bool:
        return self.ancestral and self.maximal


def _separated_with(adj, anc, xs: set[str], ys: set[str], zs: set[str]) -> bool:
    open_collider = set(zs)
    for zn in zs:
        open_collider |= anc[zn]
    return not _connecting_walk_exists(adj, xs, ys, zs, open_collider)


def _separating_subset(g: MixedGraph, u: str, v: str,
                       adj=None, anc=None) -> set[str] | None:
    """Some Z with u, v m-separated given Z, or None if no subset works.

    The ancestor set of {u, v} is tried first (it separates whenever the
    pair is separable in an ancestral graph); the exhaustive subset sweep
    after it guarantees the answer either way.
    """
    adj = adj if adj is not None else _adjacency(g)
    anc = anc if anc is not None else _ancestor_map(g)
    canonical = (anc[u] | anc[v]) - {u, v}
    if _separated_with(adj, anc, {u}, {v}, canonical):
        return canonical
    rest = [n for n in g.nodes if n not in (u, v)]
    for size in range(len(rest) + 1):
        for combo in itertools.combinations(rest, size):
            if set(combo) == canonical:
                continue
            if _separated_with(adj, anc, {u}, {v}, set(combo)):
                return set(combo)
    return None


def verify_mag(g: MixedGraph) -> MagReport:
    """Check the two defining properties of a maximal ancestral graph.

    Ancestral: no directed cycle, and no bidirected pair where one end is
    an ancestor of the other.  Maximal: every non-adjacent pair admits some
    separating subset.  The witness names the first violating pair.
    """
    if not _acyclic(g):
        for u in g.nodes:
            if u in ancestors(g, u):
                return MagReport(False, False, (u, u))
        return MagReport(False, False, None)
    anc = _ancestor_map(g)
    for u, v in sorted(g.bidirected):
        if u in anc[v] or v in anc[u]:
            return MagReport(False, False, (u, v))
    adj = _adjacency(g)
    adjacent = {frozenset((a, b)) for a, b in g.directed} | \
               {frozenset(p) for p in g.bidirected}
    for u, v in itertools.combinations(g.nodes, 2):
        if frozenset((u, v)) in adjacent:
            continue
        if _separating_subset(g, u, v, adj, anc) is None:
            return MagReport(True, False, (u, v))
    return MagReport(True, True, None)


# ---------------------------------------------------------------------------
# partial orders

@dataclass(frozen=True)
class PartialOrder:
    """Strict precedence relation: (a, b) present means a comes before b."""

    pairs: frozenset[tuple[str, str]]

    def __post_init__(self):
        for a, b in self.pairs:
            if a == b:
                raise GraphError(f"partial order is not irreflexive: ({a}, {b})")
            if (b, a) in self.pairs:
                raise GraphError(f"partial order is not antisymmetric: ({a}, {b})")
        for a, b in self.pairs:
            for c, d in self.pairs:
                if b == c and (a, d) not in self.pairs:
                    raise GraphError(f"partial order is not transitively closed: "
                                     f"({a}, {b}) and ({c}, {d}) without ({a}, {d})")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "PartialOrder":
        """Build the transitive closure of the given precedence pairs."""
        closed = set(pairs)
        changed = True
        while changed:
            changed = False
            for a, b in list(closed):
                for c, d in list(closed):
                    if b == c and (a, d) not in closed:
                        closed.add((a, d))
                        changed = True
        return cls(frozenset(closed))

    @classmethod
    def from_layers(cls, layers: Sequence[Iterable[str]]) -> "PartialOrder":
        """Every node of an earlier layer precedes every node of a later one."""
        sets = [set(layer) for layer in layers]
        pairs = set()
        for i, lo in enumerate(sets):
            for hi in sets[i + 1:]:
                pairs.update((a, b) for a in lo for b in hi)
        return cls(frozenset(pairs))

    def lt(self, a: str, b: str) -> bool:
        return (a, b) in self.pairs

    def incomparable(self, a: str, b: str) -> bool:
        return (a, b) not in self.pairs and (b, a) not in self.pairs

    def labels(self) -> set[str]:
        return {a for a, _ in self.pairs} | {b for _, b in self.pairs}


def order_compatible(order: PartialOrder, mags: Sequence[MixedGraph]) -> bool:
    """Ancestors must precede; bidirected-adjacent nodes must be incomparable.

    Nodes absent from the relation are incomparable to everything, so no
    separate label-coverage check is needed.
    """
    for g in mags:
        anc = _ancestor_map(g)
        for v in g.nodes:
            for u in anc[v]:
                if not order.lt(u, v):
                    return False
        for u, v in g.bidirected:
            if not order.incomparable(u, v):
                return False
    return True


# ---------------------------------------------------------------------------
# sub-environment families

@dataclass(frozen=True)
class SubEnvFamily:
    """K stationary sub-environments sharing one node set.

    Mask entry conventions: ``c_ss[i, j] == 1`` means state coordinate j
    causally affects next-state coordinate i; analogously for the other
    masks.  Reward masks select which next-step coordinates feed the reward
    node.  The environment label has an edge to every current state/hidden
    node in every sub-environment.
    """

    d_s: int
    d_h: int
    c_ss: tuple[np.ndarray, ...] = field(repr=False)  # (d_s, d_s) each
    c_as: tuple[np.ndarray, ...] = field(repr=False)  # (d_s,)
    c_hh: tuple[np.ndarray, ...] = field(repr=False)  # (d_h, d_h)
    c_sh: tuple[np.ndarray, ...] = field(repr=False)  # (d_h, d_s)
    c_ah: tuple[np.ndarray, ...] = field(repr=False)  # (d_h,)
    c_sr: tuple[np.ndarray, ...] = field(repr=False)  # (d_s,)
    c_hr: tuple[np.ndarray, ...] = field(repr=False)  # (d_h,)
    c_ar: tuple[int, ...] = ()

    def __post_init__(self):
        if self.d_s < 1 or self.d_h < 1:
            raise GraphError("block dimensions must be >= 1")
        k = self.n_envs
        shapes = {
            "c_ss": (self.d_s, self.d_s), "c_as": (self.d_s,),
            "c_hh": (self.d_h, self.d_h), "c_sh": (self.d_h, self.d_s),
            "c_ah": (self.d_h,), "c_sr": (self.d_s,), "c_hr": (self.d_h,),
        }
        for attr, shape in shapes.items():
            masks = getattr(self, attr)
            if len(masks) != k:
                raise GraphError(f"{attr}: expected {k} masks, got {len(masks)}")
            for m in masks:
                if m.shape != shape:
                    raise GraphError(f"{attr}: expected shape {shape}, got {m.shape}")

    @property
    def n_envs(self) -> int:
        return len(self.c_ar)

    def node_names(self) -> tuple[str, ...]:
        cur = [f"s{i + 1}" for i in range(self.d_s)] + \
              [f"h{i + 1}" for i in range(self.d_h)] + ["a"]
        nxt = [f"s{i + 1}'" for i in range(self.d_s)] + \
              [f"h{i + 1}'" for i in range(self.d_h)] + ["a'"]
        return tuple(cur + nxt + ["r'"])

    def dags(self, latent: str = "e") -> list[MixedGraph]:
        """One DAG per sub-environment, each including the latent label node."""
        names = self.node_names() + (latent,)
        s_cur = [f"s{i + 1}" for i in range(self.d_s)]
        h_cur = [f"h{i + 1}" for i in range(self.d_h)]
        s_nxt = [f"s{i + 1}'" for i in range(self.d_s)]
        h_nxt = [f"h{i + 1}'" for i in range(self.d_h)]
        out = []
        for k in range(self.n_envs):
            edges = [(latent, n) for n in s_cur + h_cur]
            for i in range(self.d_s):
                edges.extend((s_cur[j], s_nxt[i]) for j in range(self.d_s)
                             if self.c_ss[k][i, j])
                if self.c_as[k][i]:
                    edges.append(("a", s_nxt[i]))
            for i in range(self.d_h):
                edges.extend((h_cur[j], h_nxt[i]) for j in range(self.d_h)
                             if self.c_hh[k][i, j])
                edges.extend((s_cur[j], h_nxt[i]) for j in range(self.d_s)
                             if self.c_sh[k][i, j])
                if self.c_ah[k][i]:
                    edges.append(("a", h_nxt[i]))
            edges.extend((s_nxt[i], "r'") for i in range(self.d_s) if self.c_sr[k][i])
            edges.extend((h_nxt[i], "r'") for i in range(self.d_h) if self.c_hr[k][i])
            if self.c_ar[k]:
                edges.append(("a'", "r'"))
            out.append(MixedGraph.from_edges(names, edges))
        return out

    def mags(self, latent: str = "e") -> list[MixedGraph]:
        return [dag_to_mag(d, latent) for d in self.dags(latent)]

    def union_mag(self, latent: str = "e") -> MixedGraph:
        return union_mags(self.mags(latent))

    def canonical_order(self) -> PartialOrder:
        """Current-step nodes before next-step nodes before the reward node."""
        names = self.node_names()
        block = self.d_s + self.d_h + 1
        return PartialOrder.from_layers([names[:block], names[block:2 * block], ["r'"]])


def sample_subenv_family(rng: np.random.Generator, d_s: int, d_h: int, k: int,
                         edge_probability: float) -> SubEnvFamily:
    """Draw K sub-environments with independent Bernoulli masks."""
    if d_s < 1 or d_h < 1:
        raise GraphError("block dimensions must be >= 1")
    if k < 1:
        raise GraphError("need at least one sub-environment")
    if not 0.0 <= edge_probability <= 1.0:
        raise GraphError(f"edge probability must be in [0, 1], got {edge_probability}")

    def draw(shape):
        return (rng.random(shape) < edge_probability).astype(np.int64)

    return SubEnvFamily(
        d_s=d_s, d_h=d_h,
        c_ss=tuple(draw((d_s, d_s)) for _ in range(k)),
        c_as=tuple(draw((d_s,)) for _ in range(k)),
        c_hh=tuple(draw((d_h, d_h)) for _ in range(k)),
        c_sh=tuple(draw((d_h, d_s)) for _ in range(k)),
        c_ah=tuple(draw((d_h,)) for _ in range(k)),
        c_sr=tuple(draw((d_s,)) for _ in range(k)),
        c_hr=tuple(draw((d_h,)) for _ in range(k)),
        c_ar=tuple(int(rng.random() < edge_probability) for _ in range(k)),
    )


# ---------------------------------------------------------------------------
# text format

def graph_to_text(g: MixedGraph) -> str:
    lines = ["nodes: " + ",".join(g.nodes)]
    index = {n: i for i, n in enumerate(g.nodes)}
    lines.extend(f"{u} -> {v}" for u, v in
                 sorted(g.directed, key=lambda e: (index[e[0]], index[e[1]])))
    lines.extend(f"{u} <-> {v}" for u, v in
                 sorted(g.bidirected, key=lambda e: (index[e[0]], index[e[1]])))
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> MixedGraph:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("nodes:"):
        raise GraphError("graph text must start with a 'nodes:' header")
    nodes = tuple(n.strip() for n in lines[0][len("nodes:"):].split(",") if n.strip())
    directed, bidirected = [], []
    for ln in lines[1:]:
        if "<->" in ln:
            u, v = (t.strip() for t in ln.split("<->"))
            bidirected.append((u, v))
        elif "->" in ln:
            u, v = (t.strip() for t in ln.split("->"))
            directed.append((u, v))
        else:
            raise GraphError(f"unrecognized edge line: {ln!r}")
    return MixedGraph.from_edges(nodes, directed, bidirected)
