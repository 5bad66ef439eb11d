"""Reverse-mode automatic differentiation on numpy arrays.

A ``Variable`` wraps a float64 array together with a gradient
accumulator.  Primitive operations compute with numpy and, when a
``Tape`` is active and an operand requires gradients, append a record
holding the values needed for the reverse sweep.  ``backward`` replays
the tape in reverse, pushing adjoints from a scalar root into every
reachable variable.  Tapes are rebuilt on every forward pass
(define-by-run), which keeps rollouts of varying length trivial to
differentiate.

Reductions use numpy's deterministic pairwise summation, so identical
inputs give bit-identical values and gradients.
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A float64 tensor with a same-shaped gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=True, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = self.name or "Variable"
        return f"<{tag} shape={self.value.shape} requires_grad={self.requires_grad}>"


def constant(value, name=None):
    """Wrap an array as a non-differentiable Variable."""
    return Variable(value, requires_grad=False, name=name)


def zero_grads(variables):
    for v in variables:
        v.zero_grad()


class _Node:
    __slots__ = ("kind", "out", "backprop")

    def __init__(self, kind, out, backprop):
        self.kind = kind
        self.out = out
        self.backprop = backprop


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager around the forward pass, then hand the tape
    to :func:`backward`.  Records stay in creation order, which is a
    valid topological order.  The tape is left intact by the reverse
    sweep: replaying ``backward`` twice accumulates exactly twice the
    gradient.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records = []


def _record(kind, inputs, out_value, backprop):
    requires = any(v.requires_grad for v in inputs)
    out = Variable(out_value, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Node(kind, out, backprop))
    return out


def _unbroadcast(g, shape):
    # Sum adjoint contributions over the axes numpy broadcast on the way in.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(kind, av, bv):
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ValueError(
            f"{kind}: incompatible shapes {av.shape} and {bv.shape}"
        ) from None


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product ``a @ b`` with ``b`` 2-D and ``a`` carrying batch axes.

    The forward product runs through einsum's fixed per-element
    sum-of-products so each output row is bit-identical whether evaluated
    alone or inside a batch (BLAS rounds differently per batch extent).
    Gradients carry no such row contract and use the faster BLAS path.
    """
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    if av.ndim == 1:
        out = np.einsum("k,kj->j", av, bv)
    else:
        out = np.einsum("...ik,kj->...ij", av, bv)

    def backprop(g):
        k, m = bv.shape
        ga = g @ bv.T
        gb = av.reshape(-1, k).T @ g.reshape(-1, m)
        return ((a, ga), (b, gb))

    return _record("matmul", (a, b), out, backprop)


def add(a, b):
    _check_broadcast("add", a.value, b.value)
    out = a.value + b.value

    def backprop(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(g, b.value.shape)))

    return _record("add", (a, b), out, backprop)


def subtract(a, b):
    _check_broadcast("subtract", a.value, b.value)
    out = a.value - b.value

    def backprop(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, -_unbroadcast(g, b.value.shape)))

    return _record("subtract", (a, b), out, backprop)


def multiply(a, b):
    """Elementwise product, broadcasting over leading axes."""
    _check_broadcast("multiply", a.value, b.value)
    out = a.value * b.value

    def backprop(g):
        return (
            (a, _unbroadcast(g * b.value, a.value.shape)),
            (b, _unbroadcast(g * a.value, b.value.shape)),
        )

    return _record("multiply", (a, b), out, backprop)


def scalar_multiply(a, factor):
    """Product with a plain Python scalar (not a Variable)."""
    factor = float(factor)
    out = a.value * factor

    def backprop(g):
        return ((a, g * factor),)

    return _record("scalar-multiply", (a,), out, backprop)


def relu(a):
    mask = a.value > 0.0  # subgradient at 0 is 0
    out = np.where(mask, a.value, 0.0)

    def backprop(g):
        return ((a, g * mask),)

    return _record("relu", (a,), out, backprop)


def tanh(a):
    t = np.tanh(a.value)

    def backprop(g):
        return ((a, g * (1.0 - t * t)),)

    return _record("tanh", (a,), t, backprop)


def concat(parts):
    """Concatenate Variables along the last axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat: needs at least one operand")
    lead = parts[0].value.shape[:-1]
    for p in parts[1:]:
        if p.value.shape[:-1] != lead:
            raise ValueError(
                f"concat: incompatible shapes {parts[0].value.shape} and {p.value.shape}"
            )
    out = np.concatenate([p.value for p in parts], axis=-1)
    widths = [p.value.shape[-1] for p in parts]

    def backprop(g):
        grads = []
        offset = 0
        for p, w in zip(parts, widths):
            grads.append((p, g[..., offset:offset + w]))
            offset += w
        return grads

    return _record("concat", tuple(parts), out, backprop)


def slice_last(a, start, stop):
    """Contiguous slice ``a[..., start:stop]`` along the last axis."""
    width = a.value.shape[-1]
    if not (0 <= start <= stop <= width):
        raise ValueError(f"slice: bounds [{start}:{stop}] invalid for width {width}")
    out = a.value[..., start:stop]

    def backprop(g):
        full = np.zeros(a.value.shape)
        full[..., start:stop] = g
        return ((a, full),)

    return _record("slice", (a,), out, backprop)


def gather_rows(a, indices):
    """Select rows ``a[indices]`` along the first axis (gradient scatter-adds)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise ValueError(
            f"gather: index out of range for first extent {a.value.shape[0]}"
        )
    out = a.value[idx]

    def backprop(g):
        buf = np.zeros(a.value.shape)
        np.add.at(buf, idx, g)
        return ((a, buf),)

    return _record("gather", (a,), out, backprop)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    out = a.value.reshape(shape)

    def backprop(g):
        return ((a, g.reshape(a.value.shape)),)

    return _record("reshape", (a,), out, backprop)


def sum_all(a):
    """Sum of all elements, as a scalar Variable."""
    out = np.sum(a.value)

    def backprop(g):
        return ((a, np.broadcast_to(g, a.value.shape)),)

    return _record("sum", (a,), out, backprop)


def mean_all(a):
    """Mean over all elements, as a scalar Variable."""
    size = a.value.size
    out = np.sum(a.value) / size

    def backprop(g):
        return ((a, np.broadcast_to(g / size, a.value.shape)),)

    return _record("mean", (a,), out, backprop)


def square(a):
    out = a.value * a.value

    def backprop(g):
        return ((a, g * (2.0 * a.value)),)

    return _record("square", (a,), out, backprop)


_DISPATCH = {
    "matmul": lambda ops, p: matmul(*ops),
    "add": lambda ops, p: add(*ops),
    "subtract": lambda ops, p: subtract(*ops),
    "elementwise-multiply": lambda ops, p: multiply(*ops),
    "multiply": lambda ops, p: multiply(*ops),
    "scalar-multiply": lambda ops, p: scalar_multiply(ops[0], p["factor"]),
    "relu": lambda ops, p: relu(ops[0]),
    "tanh": lambda ops, p: tanh(ops[0]),
    "concat": lambda ops, p: concat(ops),
    "slice": lambda ops, p: slice_last(ops[0], p["start"], p["stop"]),
    "gather": lambda ops, p: gather_rows(ops[0], p["indices"]),
    "reshape": lambda ops, p: reshape(ops[0], p["shape"]),
    "sum": lambda ops, p: sum_all(ops[0]),
    "mean": lambda ops, p: mean_all(ops[0]),
    "square": lambda ops, p: square(ops[0]),
}


def apply_primitive(kind, operands, **params):
    """Apply a primitive by name; extra arguments go in ``params``.

    Raises ValueError for an unknown kind or incompatible operand shapes.
    """
    key = str(kind).replace("_", "-")
    fn = _DISPATCH.get(key)
    if fn is None:
        raise ValueError(f"unknown primitive kind {kind!r}")
    ops = list(operands)
    if any(not isinstance(v, Variable) for v in ops):
        raise ValueError(f"{kind}: operands must be Variables")
    return fn(ops, params)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape, root):
    """Accumulate d(root)/d(variable) into .grad for everything on the tape.

    ``root`` must be a scalar (shape () or (1,)).  Adjoints are gathered
    in a side table during the sweep and added to each requires_grad
    variable at the end, so repeated sweeps accumulate exactly.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")
    if not tape.records:
        return
    adjoints = {id(root): np.ones_like(root.value)}
    holders = {id(root): root}
    for node in reversed(tape.records):
        g_out = adjoints.get(id(node.out))
        if g_out is None:
            continue
        for var, g in node.backprop(g_out):
            key = id(var)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g
            else:
                adjoints[key] = g
                holders[key] = var
    for key, var in holders.items():
        if var.requires_grad:
            var.grad = var.grad + adjoints[key]


def check_gradients(f, variables, step=1e-6):
    """Max relative error between analytic gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar Variable built
    from the given variables.  One taped evaluation provides the
    analytic gradients; every coordinate is then perturbed by ``±step``
    and the difference quotient compared, returning
    ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be positive")
    variables = list(variables)
    zero_grads(variables)
    with Tape() as tape:
        out = f()
    if out.value.size != 1:
        raise ValueError("check_gradients: f must return a scalar")
    backward(tape, out)
    analytic = [v.grad.copy().reshape(-1) for v in variables]

    worst = 0.0
    for vi, v in enumerate(variables):
        flat = v.value.flat  # writes through even for non-contiguous values
        for i in range(v.value.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().value)
            flat[i] = orig - step
            f_minus = float(f().value)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                name = v.name or f"variables[{vi}]"
                raise ValueError(
                    f"check_gradients: non-finite value perturbing {name} coordinate {i}"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic[vi][i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
