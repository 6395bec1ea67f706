"""Dense float64 expression graphs with reverse-mode differentiation.

The engine is deliberately small: values are either scalars (0-d arrays) or
2-d matrices, everything is float64, and any NaN/Inf produced by an
operation is an error, not a value.  Graphs are built once from symbolic
``var`` leaves and re-evaluated with different bindings, which keeps the
per-sample Python overhead low enough for desk-scale training loops.

Thread-safety: nodes cache forward values and gradient accumulators, so a
single graph must only be used by one thread at a time.  Disjoint graphs
may be evaluated concurrently.
"""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .params import ParamGroup


class NumericsError(Exception):
    """Base class for evaluation failures (shape, domain, non-finite)."""


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


def as_value(x, *, what: str = "value") -> np.ndarray:
    """Coerce ``x`` to a float64 array of rank 0 or 2."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        raise ShapeError(f"{what}: expected scalar or 2-d matrix, got 1-d shape {a.shape}; "
                         f"reshape to (1, n) or (n, 1) explicitly")
    if a.ndim > 2:
        raise ShapeError(f"{what}: expected scalar or 2-d matrix, got shape {a.shape}")
    return a


class DiffNode:
    """One value in an expression graph.

    ``op`` names the operation, ``args`` are operand nodes, ``extra`` holds
    non-differentiable operation parameters (axis, clip bounds, a variable
    name).  ``value`` caches the latest forward result and ``grad``
    accumulates the gradient during a backward pass.
    """

    __slots__ = ("op", "args", "extra", "value", "grad", "_topo")

    def __init__(self, op: str, args: tuple = (), extra=None):
        self.op = op
        self.args = args
        self.extra = extra
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self._topo = None

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"DiffNode({self.op}, value_shape={shape})"

    # operator sugar for the common arithmetic
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else const(x)


def var(name: str) -> DiffNode:
    """Symbolic leaf, bound from the inputs mapping at evaluation time."""
    return DiffNode("var", (), name)


def const(value) -> DiffNode:
    node = DiffNode("const", (), None)
    node.value = as_value(value, what="const")
    return node


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    return DiffNode("add", (a, b))


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    return DiffNode("sub", (a, b))


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    return DiffNode("mul", (a, b))


def neg(a: DiffNode) -> DiffNode:
    return DiffNode("neg", (a,))


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    return DiffNode("matmul", (a, b))


def transpose(a: DiffNode) -> DiffNode:
    return DiffNode("transpose", (a,))


def add_rowvec(a: DiffNode, b: DiffNode) -> DiffNode:
    """Add a (1, d) row vector to every row of a (n, d) matrix."""
    return DiffNode("add_rowvec", (a, b))


def exp(a: DiffNode) -> DiffNode:
    return DiffNode("exp", (a,))


def log(a: DiffNode) -> DiffNode:
    return DiffNode("log", (a,))


def tanh(a: DiffNode) -> DiffNode:
    return DiffNode("tanh", (a,))


def relu(a: DiffNode) -> DiffNode:
    return DiffNode("relu", (a,))


def leaky_relu(a: DiffNode, alpha: float = 0.2) -> DiffNode:
    return DiffNode("leaky_relu", (a,), float(alpha))


def elu(a: DiffNode, alpha: float = 1.0) -> DiffNode:
    return DiffNode("elu", (a,), float(alpha))


def row_softmax(logits: DiffNode, support: DiffNode | None = None) -> DiffNode:
    """Row-wise softmax, optionally restricted to a 0/1 support matrix.

    Entries outside the support are exactly zero in the output; rows are
    shifted by their support maximum before exponentiation.  The support is
    treated as non-differentiable.  A row with empty support is an error.
    """
    args = (logits,) if support is None else (logits, support)
    return DiffNode("row_softmax", args)


def concat(a: DiffNode, b: DiffNode, axis: int = 1) -> DiffNode:
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    return DiffNode("concat", (a, b), axis)


def reshape(a: DiffNode, shape: Sequence[int]) -> DiffNode:
    return DiffNode("reshape", (a,), tuple(int(d) for d in shape))


def reduce_sum(a: DiffNode, axis: int | None = None) -> DiffNode:
    """Sum.  ``axis=None`` gives a scalar; 0/1 keeps a 2-d result."""
    if axis not in (None, 0, 1):
        raise ShapeError(f"reduce_sum: axis must be None, 0 or 1, got {axis}")
    return DiffNode("reduce_sum", (a,), axis)


def reduce_mean(a: DiffNode) -> DiffNode:
    return DiffNode("reduce_mean", (a,))


def l1_norm(a: DiffNode) -> DiffNode:
    """Entrywise L1 norm (sum of absolute values), scalar result."""
    return DiffNode("l1_norm", (a,))


def sq_l2_norm(a: DiffNode) -> DiffNode:
    """Sum of squared entries, scalar result."""
    return DiffNode("sq_l2_norm", (a,))


def frobenius_norm(a: DiffNode) -> DiffNode:
    """sqrt(sum of squares); subgradient 0 at the origin."""
    return DiffNode("frobenius_norm", (a,))


def sqrt(a: DiffNode) -> DiffNode:
    """Elementwise square root; subgradient 0 at zero entries."""
    return DiffNode("sqrt", (a,))


def minimum(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise minimum; ties route the gradient to the first operand."""
    return DiffNode("minimum", (a, b))


def clip(a: DiffNode, lo: float, hi: float) -> DiffNode:
    if not lo < hi:
        raise NumericsError(f"clip: bounds must satisfy lo < hi, got ({lo}, {hi})")
    return DiffNode("clip", (a,), (float(lo), float(hi)))


def ge_mask(a: DiffNode, threshold: float) -> DiffNode:
    """0/1 indicator of entries >= threshold.  Non-differentiable."""
    return DiffNode("ge_mask", (a,), float(threshold))


# ---------------------------------------------------------------------------
# composite helpers (built from the primitives above)

def gaussian_log_density(x: DiffNode, mean: DiffNode, log_std: DiffNode) -> DiffNode:
    """Per-row log density of a diagonal Gaussian.

    ``x`` and ``mean`` are (n, d); ``log_std`` is (1, d) and is expanded to
    every row.  Returns an (n, 1) column of log densities.
    """
    n_rows = DiffNode("ones_like_rows", (x,))
    ls = matmul(n_rows, log_std)              # (n, d) row-expanded log_std
    z = mul(sub(x, mean), exp(neg(ls)))
    per_dim = sub(mul(const(-0.5), mul(z, z)), ls)
    summed = reduce_sum(per_dim, axis=1)
    d = DiffNode("dim_cols", (x,))            # scalar: number of columns of x
    return sub(summed, mul(const(0.5 * np.log(2.0 * np.pi)), d))


def reparam_gaussian(mean: DiffNode, log_std: DiffNode, noise: DiffNode) -> DiffNode:
    """mean + exp(log_std) * noise, with the noise supplied as an input."""
    return add(mean, mul(exp(log_std), noise))


# ---------------------------------------------------------------------------
# forward rules

def _bin_shapes(op, x, y):
    if x.shape == y.shape or x.ndim == 0 or y.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ "
                     f"(only scalar-with-tensor broadcast is allowed)")


def _fwd_var(node, inputs):
    name = node.extra
    try:
        v = inputs[name]
    except KeyError:
        raise NumericsError(f"var '{name}': no binding provided") from None
    return as_value(v, what=f"var '{name}'")


def _fwd_matmul(node, a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-d, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _fwd_add_rowvec(node, a, b):
    if a.ndim != 2 or b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_rowvec: expected (n, d) and (1, d), got {a.shape} and {b.shape}")
    return a + b


def _fwd_row_softmax(node, *vals):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"row_softmax: expected 2-d logits, got {x.shape}")
    if len(vals) > 1:
        m = vals[1]
        if m.shape != x.shape:
            raise ShapeError(f"row_softmax: support shape {m.shape} != logits shape {x.shape}")
        support = m > 0.5
        empty = ~support.any(axis=1)
        if empty.any():
            row = int(np.argmax(empty))
            raise NumericsError(f"row_softmax: row {row} has empty support")
        z = np.where(support, x, -np.inf)
    else:
        z = x
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fwd_concat(node, a, b):
    axis = node.extra
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat: operands must be 2-d, got {a.shape}, {b.shape}")
    if a.shape[1 - axis] != b.shape[1 - axis]:
        raise ShapeError(f"concat(axis={axis}): shapes {a.shape} and {b.shape} do not align")
    return np.concatenate((a, b), axis=axis)


def _fwd_reshape(node, a):
    shape = node.extra
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return np.ascontiguousarray(a).reshape(shape)


def _fwd_log(node, a):
    if np.any(a <= 0.0):
        raise NumericsError(f"log: non-positive input (min {a.min()})")
    return np.log(a)


def _fwd_exp(node, a):
    with np.errstate(over="ignore"):  # overflow becomes a NonFiniteError below
        return np.exp(a)


def _fwd_elu(node, a):
    alpha = node.extra
    return np.where(a > 0.0, a, alpha * np.expm1(a))


def _fwd_frobenius(node, a):
    return np.sqrt(np.sum(a * a))


def _fwd_sqrt(node, a):
    if np.any(a < 0.0):
        raise NumericsError(f"sqrt: negative input (min {a.min()})")
    return np.sqrt(a)


_FORWARD = {
    "var": None,   # handled specially
    "const": None,
    "add": lambda n, a, b: (_bin_shapes("add", a, b), a + b)[1],
    "sub": lambda n, a, b: (_bin_shapes("sub", a, b), a - b)[1],
    "mul": lambda n, a, b: (_bin_shapes("mul", a, b), a * b)[1],
    "neg": lambda n, a: -a,
    "matmul": _fwd_matmul,
    "transpose": lambda n, a: a.T if a.ndim == 2 else a,
    "add_rowvec": _fwd_add_rowvec,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "tanh": lambda n, a: np.tanh(a),
    "relu": lambda n, a: np.maximum(a, 0.0),
    "leaky_relu": lambda n, a: np.where(a > 0.0, a, n.extra * a),
    "elu": _fwd_elu,
    "row_softmax": _fwd_row_softmax,
    "concat": _fwd_concat,
    "reshape": _fwd_reshape,
    "reduce_sum": lambda n, a: np.sum(a) if n.extra is None or a.ndim == 0
                  else np.sum(a, axis=n.extra, keepdims=True),
    "reduce_mean": lambda n, a: np.mean(a),
    "l1_norm": lambda n, a: np.sum(np.abs(a)),
    "sq_l2_norm": lambda n, a: np.sum(a * a),
    "frobenius_norm": _fwd_frobenius,
    "sqrt": _fwd_sqrt,
    "minimum": lambda n, a, b: (_bin_shapes("minimum", a, b), np.minimum(a, b))[1],
    "clip": lambda n, a: np.clip(a, n.extra[0], n.extra[1]),
    "ge_mask": lambda n, a: (a >= n.extra).astype(np.float64),
    "ones_like_rows": lambda n, a: np.ones((a.shape[0], 1)),
    "dim_cols": lambda n, a: np.float64(a.shape[1]),
}


# ---------------------------------------------------------------------------
# backward rules: each accumulates into the argument gradients

def _acc(arg: DiffNode, g: np.ndarray):
    if arg.op in ("const", "ge_mask", "ones_like_rows", "dim_cols"):
        return
    g = _reduce_to(g, arg.value)
    arg.grad = g if arg.grad is None else arg.grad + g


def _reduce_to(g, ref):
    # collapse a broadcast gradient back to a scalar operand
    if ref.ndim == 0 and np.ndim(g) != 0:
        return np.sum(g)
    return g


def _bwd_mul(node):
    a, b = node.args
    _acc(a, node.grad * b.value)
    _acc(b, node.grad * a.value)


def _bwd_matmul(node):
    a, b = node.args
    _acc(a, node.grad @ b.value.T)
    _acc(b, a.value.T @ node.grad)


def _bwd_row_softmax(node):
    y = node.value
    g = node.grad
    dot = np.sum(g * y, axis=1, keepdims=True)
    _acc(node.args[0], y * (g - dot))
    # support mask (if present) receives no gradient


def _bwd_concat(node):
    a, b = node.args
    axis = node.extra
    k = a.value.shape[axis]
    if axis == 0:
        _acc(a, node.grad[:k, :])
        _acc(b, node.grad[k:, :])
    else:
        _acc(a, node.grad[:, :k])
        _acc(b, node.grad[:, k:])


def _bwd_reduce_sum(node):
    a = node.args[0]
    _acc(a, np.broadcast_to(node.grad, a.value.shape).copy())


def _bwd_minimum(node):
    a, b = node.args
    take_a = a.value <= b.value
    _acc(a, node.grad * take_a)
    _acc(b, node.grad * ~take_a)


def _bwd_frobenius(node):
    a = node.args[0]
    v = float(node.value)
    if v == 0.0:
        return  # subgradient 0 at the origin
    _acc(a, node.grad * (a.value / v))


def _bwd_sqrt(node):
    a = node.args[0]
    y = node.value
    d = np.where(y > 0.0, 0.5 / np.where(y > 0.0, y, 1.0), 0.0)
    _acc(a, node.grad * d)


def _bwd_clip(node):
    a = node.args[0]
    lo, hi = node.extra
    inside = (a.value > lo) & (a.value < hi)
    _acc(a, node.grad * inside)


def _bwd_elu(node):
    a = node.args[0]
    alpha = node.extra
    d = np.where(a.value > 0.0, 1.0, alpha * np.exp(a.value))
    _acc(a, node.grad * d)


_BACKWARD = {
    "add": lambda n: (_acc(n.args[0], n.grad), _acc(n.args[1], n.grad)),
    "sub": lambda n: (_acc(n.args[0], n.grad), _acc(n.args[1], -n.grad)),
    "mul": _bwd_mul,
    "neg": lambda n: _acc(n.args[0], -n.grad),
    "matmul": _bwd_matmul,
    "transpose": lambda n: _acc(n.args[0], n.grad.T),
    "add_rowvec": lambda n: (_acc(n.args[0], n.grad),
                             _acc(n.args[1], n.grad.sum(axis=0, keepdims=True))),
    "exp": lambda n: _acc(n.args[0], n.grad * n.value),
    "log": lambda n: _acc(n.args[0], n.grad / n.args[0].value),
    "tanh": lambda n: _acc(n.args[0], n.grad * (1.0 - n.value * n.value)),
    "relu": lambda n: _acc(n.args[0], n.grad * (n.args[0].value > 0.0)),
    "leaky_relu": lambda n: _acc(n.args[0], n.grad * np.where(n.args[0].value > 0.0, 1.0, n.extra)),
    "elu": _bwd_elu,
    "row_softmax": _bwd_row_softmax,
    "concat": _bwd_concat,
    "reshape": lambda n: _acc(n.args[0], n.grad.reshape(n.args[0].value.shape)),
    "reduce_sum": _bwd_reduce_sum,
    "reduce_mean": lambda n: _acc(n.args[0],
                                  np.broadcast_to(n.grad / n.args[0].value.size,
                                                  n.args[0].value.shape).copy()),
    "l1_norm": lambda n: _acc(n.args[0], n.grad * np.sign(n.args[0].value)),
    "sq_l2_norm": lambda n: _acc(n.args[0], n.grad * 2.0 * n.args[0].value),
    "frobenius_norm": _bwd_frobenius,
    "sqrt": _bwd_sqrt,
    "minimum": _bwd_minimum,
    "clip": _bwd_clip,
}


# ---------------------------------------------------------------------------
# graph traversal

def _topo(root: DiffNode) -> list[DiffNode]:
    if root._topo is not None:
        return root._topo
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for arg in node.args:
            if id(arg) not in seen:
                stack.append((arg, False))
    root._topo = order
    return order


def _check_finite(node: DiffNode):
    v = node.value
    with np.errstate(invalid="ignore"):  # summing an inf-bearing array is fine
        total = v.sum() if v.ndim else v
    if not np.isfinite(total):
        name = node.extra if node.op == "var" else node.op
        raise NonFiniteError(f"non-finite result in op '{name}'")


def evaluate(expr: DiffNode, inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Forward-evaluate the graph rooted at ``expr`` with the given bindings.

    Forward values are cached on every node.  Deterministic: identical
    bindings produce bit-identical results.
    """
    inputs = inputs or {}
    for node in _topo(expr):
        if node.op == "const":
            pass
        elif node.op == "var":
            node.value = _fwd_var(node, inputs)
        else:
            node.value = np.asarray(_FORWARD[node.op](node, *(a.value for a in node.args)),
                                    dtype=np.float64)
        _check_finite(node)
    return expr.value


def gradient(expr: DiffNode, inputs: Mapping[str, np.ndarray],
             wrt: Iterable[str]) -> ParamGroup:
    """Reverse-mode gradients of a scalar ``expr`` for the named inputs.

    Names in ``wrt`` that the graph never touches are absent from the
    result.  Requesting gradients of a non-scalar root is an error.
    """
    wrt = list(wrt)
    evaluate(expr, inputs)
    if expr.value.size != 1:
        raise NumericsError(f"gradient: root must be scalar, got shape {expr.value.shape}")
    order = _topo(expr)
    for node in order:
        node.grad = None
    expr.grad = np.ones_like(expr.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        rule = _BACKWARD.get(node.op)
        if rule is not None:
            rule(node)
    # leaves sharing a name accumulate into one gradient
    collected: dict[str, np.ndarray] = {}
    wanted = set(wrt)
    for node in order:
        if node.op == "var" and node.extra in wanted and node.grad is not None:
            name = node.extra
            if name in collected:
                collected[name] = collected[name] + node.grad
            else:
                collected[name] = node.grad
    out = ParamGroup()
    for name in wrt:
        if name in collected:
            out.add(name, collected[name])
    return out


def finite_difference_check(expr: DiffNode, inputs: Mapping[str, np.ndarray],
                            eps: float = 1e-6,
                            wrt: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for each coordinate is |analytic - numeric| / max(1, |analytic|);
    the maximum over all coordinates of all checked inputs is returned.
    """
    if not eps > 0:
        raise NumericsError(f"finite_difference_check: eps must be > 0, got {eps}")
    names = list(wrt) if wrt is not None else sorted(inputs.keys())
    analytic = gradient(expr, inputs, names)
    worst = 0.0
    work = {k: np.array(as_value(v, what=f"var '{k}'"), copy=True) for k, v in inputs.items()}
    for name in names:
        if name not in analytic:
            continue
        base = work[name]
        grad = analytic[name]
        flat = base.reshape(-1) if base.ndim else base.reshape(1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = float(evaluate(expr, work))
            flat[idx] = keep - eps
            down = float(evaluate(expr, work))
            flat[idx] = keep
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(gflat[idx]))
            if err > worst:
                worst = err
    evaluate(expr, work)  # restore caches to the unperturbed point
    return worst
