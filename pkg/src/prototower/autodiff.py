"""Dense float64 arrays with define-by-run reverse-mode differentiation.

A forward pass builds a graph of DiffNode objects; backward() walks it in
reverse topological order and accumulates vector-Jacobian products. The op
set is exactly what the training objective needs, nothing speculative.
All shapes are 1-D or 2-D and every produced value is checked finite.
"""

import math

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    DomainError,
    EvaluationError,
    NonFiniteError,
    ShapeError,
)


class Tensor:
    """Immutable float64 array, 1-D or 2-D, finite everywhere.

    The public constructor copies its input so later in-place edits by the
    caller cannot corrupt a graph that already captured the value.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        _check_array(arr)
        arr.setflags(write=False)
        self.values = arr

    @classmethod
    def _wrap(cls, arr):
        """Adopt a freshly computed array without copying."""
        obj = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_array(arr)
        arr.setflags(write=False)
        obj.values = arr
        return obj

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _check_array(arr):
    if arr.ndim not in (1, 2):
        raise ShapeError(f"tensors must be 1-D or 2-D, got {arr.ndim}-D shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or infinite entries")


class DiffNode:
    """One graph node: a value, a gradient slot, and links to its inputs."""

    __slots__ = ("value", "parents", "requires_grad", "_vjp", "_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=None):
        self.value = value
        self.parents = tuple(parents)
        self._vjp = vjp
        self._grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def grad(self):
        """Accumulated gradient; zeros when nothing flowed here."""
        if self._grad is None:
            return np.zeros(self.value.shape)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return self.value.item()

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"DiffNode({kind}, shape={self.shape})"


def leaf(values):
    """Trainable input node."""
    return DiffNode(Tensor(values), requires_grad=True)


def constant(values):
    """Input node that never receives gradient."""
    return DiffNode(Tensor(values), requires_grad=False)


def as_node(x):
    if isinstance(x, DiffNode):
        return x
    if isinstance(x, Tensor):
        return DiffNode(x, requires_grad=False)
    return constant(x)


def _make(out, parents, vjp):
    return DiffNode(Tensor._wrap(out), parents=parents, vjp=vjp)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(a_shape) != 2 or len(b_shape) != 2:
        raise ShapeError(f"{op}: incompatible shapes {a_shape} and {b_shape}")
    ok_rows = a_shape[0] == b_shape[0] or a_shape[0] == 1 or b_shape[0] == 1
    ok_cols = a_shape[1] == b_shape[1] or a_shape[1] == 1 or b_shape[1] == 1
    if not (ok_rows and ok_cols):
        raise ShapeError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def matmul(a, b):
    """Matrix product of a 2-D (m, k) by a 2-D (k, n) operand."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value.values, b.value.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make(out, (a, b), vjp)


def add(a, b):
    """Elementwise sum; a (1, n) or (1, 1) operand broadcasts over rows."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value.values, b.value.values
    _check_broadcast(av.shape, bv.shape, "add")
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value.values, b.value.values
    _check_broadcast(av.shape, bv.shape, "sub")
    out = av - bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    """Elementwise product with the same row-wise broadcast rule as add."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value.values, b.value.values
    _check_broadcast(av.shape, bv.shape, "mul")
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(out, (a, b), vjp)


def scale(a, c):
    """Multiply by a plain python constant."""
    a = as_node(a)
    c = float(c)
    out = a.value.values * c

    def vjp(g):
        return (g * c,)

    return _make(out, (a,), vjp)


def neg(a):
    return scale(a, -1.0)


def relu(a):
    a = as_node(a)
    av = a.value.values
    out = np.maximum(av, 0.0)

    def vjp(g):
        return (g * (av > 0.0),)

    return _make(out, (a,), vjp)


def exp(a):
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value.values)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log_clamped(a, eps=1e-12):
    """Natural log of max(x, eps); gradient is zero where the clamp bites."""
    if eps <= 0:
        raise DomainError(f"log_clamped eps must be positive, got {eps}")
    a = as_node(a)
    av = a.value.values
    clamped = np.maximum(av, eps)
    out = np.log(clamped)

    def vjp(g):
        return (g * (av > eps) / clamped,)

    return _make(out, (a,), vjp)


def transpose(a):
    a = as_node(a)
    av = a.value.values
    if av.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got shape {av.shape}")
    out = av.T

    def vjp(g):
        return (g.T,)

    return _make(out, (a,), vjp)


def sum_all(a):
    """Sum of all entries as a (1, 1) node."""
    a = as_node(a)
    av = a.value.values
    out = np.array([[av.sum()]])

    def vjp(g):
        return (np.full(av.shape, g.reshape(-1)[0]),)

    return _make(out, (a,), vjp)


def mean_all(a):
    a = as_node(a)
    n = a.value.values.size
    return scale(sum_all(a), 1.0 / n)


def l2_normalize_rows(a):
    """Scale each row of a 2-D operand to unit Euclidean norm.

    A row with norm below 1e-12 is a degenerate-row error naming the row.
    """
    a = as_node(a)
    av = a.value.values
    if av.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D operand, got shape {av.shape}")
    norms = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    small = np.flatnonzero(norms.reshape(-1) < 1e-12)
    if small.size:
        raise DegenerateRowError(f"row {small[0]} has norm below 1e-12")
    out = av / norms

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return _make(out, (a,), vjp)


def _temperature_value(temperature):
    if isinstance(temperature, DiffNode):
        t = temperature.value.item()
    else:
        t = float(temperature)
    if not math.isfinite(t) or t <= 0:
        raise DomainError(f"temperature must be positive and finite, got {t}")
    return t


def softmax_rows(a, temperature=1.0):
    """Row-wise softmax of x / temperature.

    temperature may be a positive float or a positive (1, 1) node, in
    which case the result is differentiable with respect to it.
    """
    a = as_node(a)
    av = a.value.values
    if av.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got shape {av.shape}")
    t = _temperature_value(temperature)
    u = av / t
    shifted = u - u.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    if isinstance(temperature, DiffNode):
        t_node = temperature

        def vjp(g):
            gx = (g - np.sum(g * p, axis=1, keepdims=True)) * p / t
            inner = np.sum(p * u, axis=1, keepdims=True) - u
            gt = np.array([[np.sum(g * p * inner) / t]])
            return gx, gt

        return _make(p, (a, t_node), vjp)

    def vjp(g):
        return ((g - np.sum(g * p, axis=1, keepdims=True)) * p / t,)

    return _make(p, (a,), vjp)


def log_softmax_rows(a):
    """Row-wise log softmax, computed without forming the softmax first."""
    a = as_node(a)
    av = a.value.values
    if av.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D operand, got shape {av.shape}")
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    out = shifted - np.log(denom)
    p = e / denom

    def vjp(g):
        return (g - p * np.sum(g, axis=1, keepdims=True),)

    return _make(out, (a,), vjp)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate gradients of every ancestor of a scalar loss node."""
    if loss.value.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss._grad = np.ones(loss.value.shape)
    for node in reversed(order):
        if node._vjp is None or node._grad is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node._vjp(node._grad)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError("backward produced a non-finite gradient")
            parent._grad = pg if parent._grad is None else parent._grad + pg


def _eval_scalar(f, arrays):
    nodes = [leaf(a) for a in arrays]
    try:
        out = f(nodes)
    except NonFiniteError as err:
        raise EvaluationError(f"objective not finite at probe point: {err}") from err
    val = out.value.item() if isinstance(out, DiffNode) else float(out)
    if not math.isfinite(val):
        raise EvaluationError("objective not finite at probe point")
    return val


def finite_diff_check(f, params, step=1e-5):
    """Compare backward() against a central-difference probe of f.

    f maps a list of leaf nodes (one per entry of params) to a scalar node.
    Returns the worst relative error max|analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8) over every coordinate.
    """
    if not 1e-7 <= step <= 1e-3:
        raise DomainError(f"finite-difference step must lie in [1e-7, 1e-3], got {step}")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    nodes = [leaf(a) for a in arrays]
    try:
        loss = f(nodes)
    except NonFiniteError as err:
        raise EvaluationError(f"objective not finite at base point: {err}") from err
    if not math.isfinite(loss.value.item()):
        raise EvaluationError("objective not finite at base point")
    backward(loss)
    analytic = [n.grad.copy() for n in nodes]

    worst = 0.0
    for pi, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = _eval_scalar(f, arrays)
            flat[j] = orig - step
            lo = _eval_scalar(f, arrays)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
