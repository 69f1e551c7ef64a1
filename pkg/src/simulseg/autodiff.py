"""Reverse-mode automatic differentiation over dense float64 arrays.

A Graph is an append-only tape: every primitive creates one output Tensor
and records a closure computing the vector-Jacobian product for its
parents.  Because outputs are always created after their inputs, tape
order is already a topological order, and backward() is a single reverse
sweep that visits each node exactly once.

All data is float64.  Reductions rely on numpy's deterministic reduction
order, so repeated forward passes on identical inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Operands with incompatible shapes were combined."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_shapes(op: str, a: "Tensor", b: "Tensor") -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient back to a (possibly scalar) operand shape."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


class Tensor:
    """Dense float64 array recorded on a Graph.

    Leaf tensors (constants and parameters) have no parents; every other
    tensor stores its parents and a vjp closure mapping the output
    gradient to per-parent gradients.
    """

    __slots__ = ("data", "graph", "parents", "_vjp", "name")

    def __init__(self, data, graph: "Graph", parents=(), vjp=None, name=None):
        self.data = _as_f64(data)
        self.graph = graph
        self.parents = tuple(parents)
        self._vjp = vjp
        self.name = name
        graph._record(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- elementwise arithmetic -------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise ValueError("operands belong to different graphs")
            return other
        return self.graph.tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        _check_shapes("add", self, other)
        return Tensor(
            self.data + other.data, self.graph, (self, other),
            lambda g: (_reduce_to(g, self.shape), _reduce_to(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        _check_shapes("sub", self, other)
        return Tensor(
            self.data - other.data, self.graph, (self, other),
            lambda g: (_reduce_to(g, self.shape), _reduce_to(-g, other.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        _check_shapes("mul", self, other)
        a, b = self.data, other.data
        return Tensor(
            a * b, self.graph, (self, other),
            lambda g: (_reduce_to(g * b, self.shape), _reduce_to(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor(-self.data, self.graph, (self,), lambda g: (-g,))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; "
                            "use renorm_rows or multiply by a reciprocal scalar")
        inv = 1.0 / float(scalar)
        return Tensor(self.data * inv, self.graph, (self,), lambda g: (g * inv,))

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return Tensor(
            a @ b, self.graph, (self, other),
            lambda g: (g @ b.T, a.T @ g),
        )

    # -- shape ops ---------------------------------------------------------

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            if _is_fancy(key):
                np.add.at(full, key, g)
            else:
                full[key] += g
            return (full,)

        return Tensor(out, self.graph, (self,), vjp)

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeMismatch(f"transpose: expected a matrix, got shape {self.shape}")
        return Tensor(self.data.T.copy(), self.graph, (self,), lambda g: (g.T,))

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(shape), self.graph, (self,),
                      lambda g: (g.reshape(old),))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None):
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.full(shape, g),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor(np.sum(self.data, axis=axis), self.graph, (self,), vjp)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def cumsum(self, axis):
        def vjp(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Tensor(np.cumsum(self.data, axis=axis), self.graph, (self,), vjp)

    def l2norm(self):
        x = self.data
        n = float(np.sqrt(np.sum(x * x)))

        def vjp(g):
            if n == 0.0:
                return (np.zeros_like(x),)
            return (g * x / n,)

        return Tensor(n, self.graph, (self,), vjp)

    # -- elementwise nonlinearities -----------------------------------------

    def sigmoid(self):
        x = self.data
        if np.isnan(x).any():
            raise ValueError("sigmoid: input contains NaN")
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor(out, self.graph, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        x = self.data
        return Tensor(np.maximum(x, 0.0), self.graph, (self,),
                      lambda g: (g * (x > 0),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, self.graph, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        if np.any(x <= 0):
            raise ValueError("log: input must be strictly positive")
        return Tensor(np.log(x), self.graph, (self,), lambda g: (g / x,))

    def abs(self):
        x = self.data
        return Tensor(np.abs(x), self.graph, (self,), lambda g: (g * np.sign(x),))

    def maxpool(self, kernel: int):
        """Max over non-overlapping windows of a 1-D tensor.

        The final partial window is kept.  Ties break toward the lowest
        index; gradient flows only to the selected element.
        """
        if self.data.ndim != 1:
            raise ShapeMismatch(f"maxpool: expected a vector, got shape {self.shape}")
        if kernel < 1:
            raise ValueError(f"maxpool: kernel must be >= 1, got {kernel}")
        x = self.data
        n = x.size
        starts = range(0, n, kernel)
        winners = np.array([s + int(np.argmax(x[s:s + kernel])) for s in starts])
        out = x[winners]

        def vjp(g):
            full = np.zeros(n)
            np.add.at(full, winners, g)
            return (full,)

        return Tensor(out, self.graph, (self,), vjp)


def _is_fancy(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# -- multi-input primitives --------------------------------------------------


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    b = a._coerce(b)
    _check_shapes("maximum", a, b)
    pick_a = a.data >= b.data
    return Tensor(
        np.where(pick_a, a.data, b.data), a.graph, (a, b),
        lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
    )


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    b = a._coerce(b)
    _check_shapes("minimum", a, b)
    pick_a = a.data <= b.data
    return Tensor(
        np.where(pick_a, a.data, b.data), a.graph, (a, b),
        lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a width-d bias vector to every row of a [n, d] matrix."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"add_bias: x {x.shape} incompatible with bias {bias.shape}")
    return Tensor(x.data + bias.data, x.graph, (x, bias),
                  lambda g: (g, np.sum(g, axis=0)))


def concat(tensors, axis=0) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    graph = tensors[0].graph
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  graph, tensors, vjp)


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack: need at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatch(f"stack: shapes differ, {shape} vs {t.shape}")
    return Tensor(np.stack([t.data for t in tensors]), tensors[0].graph, tensors,
                  lambda g: tuple(g[i] for i in range(len(tensors))))


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Row-wise softmax over the last axis, restricted to allowed entries.

    `mask` is a boolean array (True = allowed); masked entries get exactly
    zero probability and zero gradient.  Rows with no allowed entry are
    rejected.
    """
    x = scores.data
    if np.isnan(x).any():
        raise ValueError("masked_softmax: input contains NaN")
    if mask is None:
        allowed = np.ones(x.shape, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != x.shape:
            raise ShapeMismatch(
                f"masked_softmax: mask shape {allowed.shape} != scores shape {x.shape}")
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")

    shifted = np.where(allowed, x, -np.inf)
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - inner),)

    return Tensor(p, scores.graph, (scores,), vjp)


def renorm_rows(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Scale each row of a non-negative matrix to sum to one.

    The denominator is floored to keep rows with vanishing mass finite.
    """
    denom = np.sum(x.data, axis=-1, keepdims=True) + floor
    out = x.data / denom

    def vjp(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - inner) / denom,)

    return Tensor(out, x.graph, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = g * gain.data
        gmean = np.mean(gx, axis=-1, keepdims=True)
        gproj = np.mean(gx * xhat, axis=-1, keepdims=True)
        dx = (gx - gmean - xhat * gproj) * inv
        axes = tuple(range(g.ndim - 1))
        return (dx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes))

    return Tensor(out, x.graph, (x, gain, bias), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id; gradient scatter-adds back."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"embedding: id out of range for vocabulary of size {vocab}")

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(table.data[idx], table.graph, (table,), vjp)


def linear_scan(coeff: Tensor, drive: Tensor) -> Tensor:
    """First-order linear recurrence r[0]=d[0], r[k]=r[k-1]*c[k-1]+d[k].

    `coeff` has one fewer entry than `drive`.  This is the kernel of the
    emission reachability recursion; the backward pass is the adjoint
    recurrence run in reverse.
    """
    c, d = coeff.data, drive.data
    if c.ndim != 1 or d.ndim != 1 or c.size != d.size - 1:
        raise ShapeMismatch(
            f"linear_scan: need coeff shape (n-1,) for drive shape (n,), "
            f"got {coeff.shape} and {drive.shape}")
    n = d.size
    r = np.empty(n)
    r[0] = d[0]
    for k in range(1, n):
        r[k] = r[k - 1] * c[k - 1] + d[k]

    def vjp(g):
        adj = np.empty(n)
        adj[n - 1] = g[n - 1]
        for k in range(n - 2, -1, -1):
            adj[k] = g[k] + adj[k + 1] * c[k]
        grad_c = adj[1:] * r[:-1]
        return (grad_c, adj)

    return Tensor(r, coeff.graph, (coeff, drive), vjp)


# -- the tape -----------------------------------------------------------------


class Graph:
    """Append-only tape of primitive applications plus named parameters."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}

    def _record(self, t: Tensor) -> None:
        self.nodes.append(t)

    def tensor(self, data) -> Tensor:
        """Create a constant leaf."""
        return Tensor(data, self)

    def parameter(self, name: str, data) -> Tensor:
        """Create a trainable leaf; gradients are reported under `name`."""
        if name in self.parameters:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, self, name=name)
        self.parameters[name] = t
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter.

        A fresh gradient map is built per call, so repeated calls on the
        same graph return identical results.
        """
        if loss.graph is not self:
            raise ValueError("loss does not belong to this graph")
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return {
            name: grads.get(id(p), np.zeros(p.shape))
            for name, p in self.parameters.items()
        }


# -- gradient verification -----------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def finite_diff_check(build, params: dict[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    `build(params)` must deterministically construct a fresh graph and
    return its scalar loss tensor; determinism is verified by evaluating
    twice and requiring bit-identical losses.
    """
    loss = build(params)
    again = build(params)
    if loss.data.tobytes() != again.data.tobytes():
        raise ValueError("finite_diff_check: builder is not deterministic")
    analytic = loss.graph.backward(loss)

    report = GradCheckReport(tol=tol)
    for name, base in params.items():
        a = analytic[name]
        worst = (0.0, (), 0.0, 0.0)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build(params).data)
            flat[i] = orig - h
            down = float(build(params).data)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            ana = float(a.reshape(-1)[i])
            err = _rel_err(ana, num)
            if err >= worst[0]:
                worst = (err, np.unravel_index(i, base.shape), ana, num)
        report.entries.append(GradCheckEntry(name, *worst))
    return report
