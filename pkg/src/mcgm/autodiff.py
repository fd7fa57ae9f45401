"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Value` wraps a numpy array and
remembers how it was produced; :func:`backward` walks the graph once in
reverse topological order and accumulates gradients additively, so calling
it twice without clearing grads adds a second full contribution.

Every kernel stores a closure that maps the output gradient to per-parent
gradients. There is no broadcasting beyond the row-wise bias in
:func:`linear`; shape rules are checked eagerly and violations raise
:class:`~mcgm.errors.DimensionError` with both shapes in the message.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_LN2 = float(np.log(2.0))


class Value:
    """A node in the computation graph: float64 data plus optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return list(self.data.shape)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value(shape={tuple(self.data.shape)}{flag})"


class Parameter(Value):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = str(name)

    def detached(self):
        """A non-tracked view sharing this parameter's storage."""
        return Value(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.data.shape)})"


def from_op(data, parents, backward_fn):
    """Build a Value from an op result.

    ``backward_fn(g)`` must return one gradient array (or None) per parent,
    in order. The closure is kept only if at least one parent is tracked.
    """
    out = Value(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_2d(x, op):
    if x.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D array, got shape {tuple(x.data.shape)}")


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shapes {tuple(a.data.shape)} and {tuple(b.data.shape)} differ"
        )


def add(a, b):
    """Elementwise sum of two same-shape arrays."""
    _same_shape(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    """Elementwise difference of two same-shape arrays."""
    _same_shape(a, b, "sub")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product of two same-shape arrays."""
    _same_shape(a, b, "mul")
    da, db = a.data, b.data
    return from_op(da * db, (a, b), lambda g: (g * db, g * da))


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def linear(x, weight, bias):
    """Row-wise affine map ``x @ weight + bias``.

    x: [N, d_in], weight: [d_in, d_out], bias: [d_out]. The bias is the only
    broadcast in the engine (added to every row).
    """
    _as_2d(x, "linear")
    _as_2d(weight, "linear")
    if x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"linear: input {tuple(x.data.shape)} does not match weight "
            f"{tuple(weight.data.shape)}"
        )
    if bias.data.ndim != 1 or bias.data.shape[0] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: bias {tuple(bias.data.shape)} does not match weight "
            f"{tuple(weight.data.shape)}"
        )
    xd, wd = x.data, weight.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return from_op(xd @ wd + bias.data, (x, weight, bias), back)


def concat_features(a, b):
    """Concatenate two row-aligned 2-D arrays along the feature axis."""
    _as_2d(a, "concat_features")
    _as_2d(b, "concat_features")
    if a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"concat_features: row counts {a.data.shape[0]} and {b.data.shape[0]} differ"
        )
    na = a.data.shape[1]
    return from_op(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :na], g[:, na:]),
    )


def _check_index(idx, n, op):
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"{op}: index must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")
    return idx


def gather_rows(x, idx):
    """Select rows of a 2-D array by index; repeated rows are allowed."""
    _as_2d(x, "gather_rows")
    idx = _check_index(idx, x.data.shape[0], "gather_rows")
    n = x.data.shape[0]

    def back(g):
        gx = np.zeros((n, g.shape[1]))
        np.add.at(gx, idx, g)
        return (gx,)

    return from_op(x.data[idx], (x,), back)


def segment_sum(x, seg, n_segments):
    """Sum rows of ``x`` into ``n_segments`` bins given by ``seg``."""
    _as_2d(x, "segment_sum")
    seg = _check_index(seg, n_segments, "segment_sum")
    if seg.shape[0] != x.data.shape[0]:
        raise DimensionError(
            f"segment_sum: {x.data.shape[0]} rows but {seg.shape[0]} segment ids"
        )
    out = np.zeros((n_segments, x.data.shape[1]))
    np.add.at(out, seg, x.data)
    return from_op(out, (x,), lambda g: (g[seg],))


def segment_mean(x, seg, n_segments):
    """Mean of rows per segment; segments with no members give zero rows."""
    _as_2d(x, "segment_mean")
    seg = _check_index(seg, n_segments, "segment_mean")
    if seg.shape[0] != x.data.shape[0]:
        raise DimensionError(
            f"segment_mean: {x.data.shape[0]} rows but {seg.shape[0]} segment ids"
        )
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)
    out = np.zeros((n_segments, x.data.shape[1]))
    np.add.at(out, seg, x.data)
    out /= denom[:, None]

    def back(g):
        return (g[seg] / denom[seg, None],)

    return from_op(out, (x,), back)


def where_rows(mask, a, b):
    """Row-wise select: rows of ``a`` where ``mask`` is set, else rows of ``b``."""
    _as_2d(a, "where_rows")
    _same_shape(a, b, "where_rows")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.data.shape[0],):
        raise DimensionError(
            f"where_rows: mask shape {mask.shape} does not match {a.data.shape[0]} rows"
        )
    m = mask[:, None]
    return from_op(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (g * m, g * ~m),
    )


def row_norm(x):
    """Euclidean norm of each row of a 2-D array, returned as a 1-D array.

    The derivative at a zero row is defined as zero so that coincident
    points do not poison gradients.
    """
    _as_2d(x, "row_norm")
    d = np.sqrt(np.sum(x.data * x.data, axis=1))
    safe = np.where(d > 0.0, d, 1.0)
    xd = x.data

    def back(g):
        return ((g / safe)[:, None] * np.where(d[:, None] > 0.0, xd, 0.0),)

    return from_op(d, (x,), back)


def shifted_softplus(x):
    """ln(0.5 * exp(x) + 0.5), elementwise; zero at the origin."""
    out = np.logaddexp(x.data, 0.0) - _LN2
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return from_op(out, (x,), lambda g: (g * sig,))


def absolute(x):
    """Elementwise absolute value, subgradient zero at the origin."""
    s = np.sign(x.data)
    return from_op(np.abs(x.data), (x,), lambda g: (g * s,))


def reduce_sum(x):
    """Sum of all entries, as a shape-[1] Value."""
    shp = x.data.shape
    return from_op(
        np.array([x.data.sum()]),
        (x,),
        lambda g: (np.full(shp, g[0]),),
    )


def reduce_mean(x):
    """Mean of all entries, as a shape-[1] Value."""
    n = x.data.size
    if n == 0:
        raise ContractError("reduce_mean: empty array")
    shp = x.data.shape
    return from_op(
        np.array([x.data.mean()]),
        (x,),
        lambda g: (np.full(shp, g[0] / n),),
    )


def backward(loss):
    """Propagate gradients from a scalar loss to every tracked ancestor.

    Accumulation is additive: each call adds one full contribution on top of
    whatever ``grad`` already holds.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {tuple(loss.data.shape)}")
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, positions, h=1e-5):
    """Compare the autodiff gradient of ``f`` against central differences.

    ``f`` maps a [N, 3] position Value to a scalar Value and must be pure.
    Returns max over coordinates of |autodiff - fd| / (|fd| + 1e-10).
    """
    if not h > 0.0:
        raise ContractError("grad_check: step h must be positive")
    base = np.array(positions, dtype=np.float64)
    leaf = Value(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: f returned a non-finite value")
    backward(out)
    auto = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fp = float(f(Value(plus)).data.reshape(-1)[0])
        fm = float(f(Value(minus)).data.reshape(-1)[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: finite-difference probe returned non-finite value")
        fd = (fp - fm) / (2.0 * h)
        err = abs(auto[idx] - fd) / (abs(fd) + 1e-10)
        worst = max(worst, err)
    return worst
