"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: it supports exactly the operations the
networks and losses in this package need (dense matmul, elementwise
arithmetic, relu/sigmoid/exp, axis reductions, concat/slice/reshape, a
bias-style row broadcast, and mean-squared-error), nothing more.  Graphs are
built eagerly: every op computes its value on construction, so a `Tensor` is
simultaneously a value and a node in the computation DAG.

Two global precision modes exist: float32 for training throughput and
float64 for verification (finite-difference gradient checks are meaningless
in single precision).  The mode applies to newly created leaves; mixing
dtypes inside one graph is an error.

Gradient conventions:
  * `backward` seeds the scalar output with 1 and accumulates adjoints by
    summation over fan-out.
  * `reduce_max` splits the adjoint evenly across tied maxima.
  * Adjoints are only computed for subgraphs that reach a parameter leaf
    (constants never receive gradients), which keeps training backward
    passes cheap.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "NonFiniteError",
    "Tensor",
    "parameter",
    "constant",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "negate",
    "reduce_sum",
    "reduce_max",
    "mse",
    "concat",
    "slice_axis",
    "broadcast_rows",
    "reshape",
    "topo_order",
    "forward",
    "backward",
    "grad_check",
    "precision",
    "set_precision",
    "default_dtype",
    "finite_checks_enabled",
    "finite_checks",
]


class GraphError(Exception):
    """Shape/usage error while building or evaluating a graph."""


class NonFiniteError(GraphError):
    """An op produced NaN or Inf; the message names the offending node."""


_DTYPE = np.float32
_CHECK_FINITE = True
_ids = itertools.count()


def default_dtype():
    return _DTYPE


def set_precision(mode):
    """Set the global precision mode: "float32" or "float64"."""
    global _DTYPE
    if mode in ("float32", np.float32):
        _DTYPE = np.float32
    elif mode in ("float64", np.float64):
        _DTYPE = np.float64
    else:
        raise ValueError(f"unknown precision mode {mode!r}")


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the global precision mode."""
    global _DTYPE
    saved = _DTYPE
    set_precision(mode)
    try:
        yield
    finally:
        _DTYPE = saved


def finite_checks_enabled():
    return _CHECK_FINITE


@contextlib.contextmanager
def finite_checks(enabled):
    """Toggle the per-op NaN/Inf scan.

    The scan costs a full pass over every intermediate, so the trainer
    disables it inside hot steps and instead validates the final loss,
    re-running the step with checks on when something went non-finite.
    """
    global _CHECK_FINITE
    saved = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE = saved


class Tensor:
    """A node in the computation DAG; leaves carry data, ops carry history.

    Immutable after construction: training updates build fresh leaves from
    updated numpy arrays rather than mutating tensors in place.
    """

    __slots__ = ("data", "op", "inputs", "attrs", "requires_grad", "name", "uid")

    def __init__(self, data, op=None, inputs=(), attrs=None, requires_grad=False, name=None):
        self.data = data
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.name = name
        self.uid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def label(self):
        base = self.name if self.name else (self.op or "leaf")
        return f"{base}#{self.uid}"

    def __repr__(self):
        return f"Tensor({self.label()}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Thin operator sugar; all real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __sub__(self, other):
        return add(self, negate(other))


def _leaf_array(values):
    # np.ascontiguousarray would promote 0-d arrays to 1-d; np.asarray + an
    # explicit contiguity fix preserves scalar shapes
    arr = np.asarray(values, dtype=_DTYPE)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def parameter(values, name=None):
    """A trainable leaf; gradients flow into it."""
    return Tensor(_leaf_array(values), requires_grad=True, name=name)


def constant(values, name=None):
    """A non-trainable leaf (inputs, targets, fixed coefficients)."""
    return Tensor(_leaf_array(values), requires_grad=False, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _check_value(op, value, names):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{op}' on {names} produced non-finite values")
    return value


def _node(op, value, inputs, attrs=None):
    names = ", ".join(t.label() for t in inputs)
    _check_value(op, value, names)
    req = any(t.requires_grad for t in inputs)
    return Tensor(value, op=op, inputs=inputs, attrs=attrs, requires_grad=req)


def _same_dtype(op, *tensors):
    dts = {t.data.dtype for t in tensors}
    if len(dts) > 1:
        raise GraphError(f"op '{op}': mixed dtypes {sorted(map(str, dts))}; "
                         "all leaves of one graph must share the precision mode")


# ---------------------------------------------------------------------------
# Operations.  Each has a pure evaluator (used both at build time and by
# `forward` replays) and a VJP rule used by `backward`.
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} @ {b.shape} "
                         f"({a.label()}, {b.label()})")
    return _node("matmul", a.data @ b.data, (a, b))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise GraphError(f"add: shape mismatch {a.shape} vs {b.shape} "
                         f"({a.label()}, {b.label()}); use broadcast_rows for biases")
    return _node("add", a.data + b.data, (a, b))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise GraphError(f"mul: shape mismatch {a.shape} vs {b.shape} "
                         f"({a.label()}, {b.label()})")
    return _node("mul", a.data * b.data, (a, b))


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    return _node("scale", a.data * a.data.dtype.type(s), (a,), attrs=s)


def relu(a):
    a = _as_tensor(a)
    return _node("relu", np.maximum(a.data, 0), (a,))


def _sigmoid_np(x):
    # exp of a non-positive argument only, so float32 never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    a = _as_tensor(a)
    return _node("sigmoid", _sigmoid_np(a.data), (a,))


def exp(a):
    a = _as_tensor(a)
    return _node("exp", np.exp(a.data), (a,))


def negate(a):
    a = _as_tensor(a)
    return _node("negate", -a.data, (a,))


def reduce_sum(a, axis=None):
    a = _as_tensor(a)
    return _node("reduce_sum", np.sum(a.data, axis=axis), (a,), attrs=axis)


def reduce_max(a, axis=None):
    a = _as_tensor(a)
    return _node("reduce_max", np.max(a.data, axis=axis), (a,), attrs=axis)


def mse(a, b):
    """Mean squared error over all entries; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("mse", a, b)
    if a.shape != b.shape:
        raise GraphError(f"mse: shape mismatch {a.shape} vs {b.shape} "
                         f"({a.label()}, {b.label()})")
    d = a.data - b.data
    return _node("mse", np.mean(d * d), (a, b))


def concat(tensors, axis=0):
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise GraphError("concat: empty input list")
    _same_dtype("concat", *ts)
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise GraphError(f"concat along axis {axis}: {e}") from None
    return _node("concat", value, ts, attrs=axis)


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    a = _as_tensor(a)
    if not (0 <= axis < a.data.ndim):
        raise GraphError(f"slice_axis: axis {axis} out of range for {a.shape}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise GraphError(f"slice_axis: [{start}:{stop}) invalid for axis of length {n}")
    idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(a.data.ndim))
    return _node("slice", a.data[idx], (a,), attrs=(axis, start, stop))


def broadcast_rows(v, rows):
    """Broadcast a 1-D bias vector over `rows` rows: (k,) -> (rows, k).

    The only broadcast pattern the networks need; anything fancier is
    rejected at construction to keep the correctness surface small.
    """
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise GraphError(f"broadcast_rows: expected 1-D vector, got {v.shape} ({v.label()})")
    value = np.broadcast_to(v.data, (int(rows), v.shape[0]))
    return _node("broadcast", value, (v,), attrs=int(rows))


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise GraphError(f"reshape: cannot view {a.shape} as {shape} ({a.label()})") from None
    return _node("reshape", value, (a,), attrs=shape)


# --- replay evaluators -----------------------------------------------------

_EVAL = {
    "matmul": lambda vals, attrs: vals[0] @ vals[1],
    "add": lambda vals, attrs: vals[0] + vals[1],
    "mul": lambda vals, attrs: vals[0] * vals[1],
    "scale": lambda vals, attrs: vals[0] * vals[0].dtype.type(attrs),
    "relu": lambda vals, attrs: np.maximum(vals[0], 0),
    "sigmoid": lambda vals, attrs: _sigmoid_np(vals[0]),
    "exp": lambda vals, attrs: np.exp(vals[0]),
    "negate": lambda vals, attrs: -vals[0],
    "reduce_sum": lambda vals, attrs: np.sum(vals[0], axis=attrs),
    "reduce_max": lambda vals, attrs: np.max(vals[0], axis=attrs),
    "mse": lambda vals, attrs: np.mean((vals[0] - vals[1]) ** 2),
    "concat": lambda vals, attrs: np.concatenate(list(vals), axis=attrs),
    "slice": lambda vals, attrs: vals[0][tuple(
        slice(attrs[1], attrs[2]) if d == attrs[0] else slice(None)
        for d in range(vals[0].ndim))],
    "broadcast": lambda vals, attrs: np.broadcast_to(vals[0], (attrs, vals[0].shape[0])),
    "reshape": lambda vals, attrs: vals[0].reshape(attrs),
}


# --- VJP rules ---------------------------------------------------------------

def _unreduce(g, in_shape, axis):
    """Inverse of a sum/mean reduction: broadcast the adjoint back.

    Materialized rather than returned as a 0-stride view: broadcast views
    that reach a matmul adjoint knock numpy off the BLAS fast path.
    """
    if axis is None:
        return np.full(in_shape, g, dtype=np.asarray(g).dtype)
    return np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), in_shape))


def _vjp(node, g, vals):
    """Adjoints of `node`'s inputs given output adjoint `g`.

    Returns a list aligned with node.inputs; entries may be None for inputs
    that do not require gradients.
    """
    op, attrs = node.op, node.attrs
    ins = node.inputs
    need = [t.requires_grad for t in ins]

    if op == "matmul":
        a, b = vals[ins[0].uid], vals[ins[1].uid]
        return [g @ b.T if need[0] else None,
                a.T @ g if need[1] else None]
    if op == "add":
        return [g if need[0] else None, g if need[1] else None]
    if op == "mul":
        a, b = vals[ins[0].uid], vals[ins[1].uid]
        return [g * b if need[0] else None, g * a if need[1] else None]
    if op == "scale":
        return [g * g.dtype.type(attrs)]
    if op == "relu":
        x = vals[ins[0].uid]
        return [g * (x > 0)]
    if op == "sigmoid":
        s = vals[node.uid]
        return [g * s * (1.0 - s)]
    if op == "exp":
        return [g * vals[node.uid]]
    if op == "negate":
        return [-g]
    if op == "reduce_sum":
        return [_unreduce(g, ins[0].shape, attrs)]
    if op == "reduce_max":
        x = vals[ins[0].uid]
        m = vals[node.uid]
        mask = (x == _unreduce(m, x.shape, attrs))
        counts = np.sum(mask, axis=attrs)
        return [mask * _unreduce(g / counts, x.shape, attrs)]
    if op == "mse":
        a, b = vals[ins[0].uid], vals[ins[1].uid]
        d = (a - b) * (g * 2.0 / a.size)
        return [d if need[0] else None, -d if need[1] else None]
    if op == "concat":
        grads = []
        offset = 0
        for i, t in enumerate(ins):
            w = t.shape[attrs]
            if need[i]:
                idx = tuple(slice(offset, offset + w) if d == attrs else slice(None)
                            for d in range(g.ndim))
                grads.append(g[idx])
            else:
                grads.append(None)
            offset += w
        return grads
    if op == "slice":
        axis, start, stop = attrs
        out = np.zeros(ins[0].shape, dtype=g.dtype)
        idx = tuple(slice(start, stop) if d == axis else slice(None)
                    for d in range(out.ndim))
        out[idx] = g
        return [out]
    if op == "broadcast":
        return [g.sum(axis=0)]
    if op == "reshape":
        return [g.reshape(ins[0].shape)]
    raise GraphError(f"no gradient rule for op '{op}'")


# ---------------------------------------------------------------------------
# Graph traversal, evaluation, differentiation.
# ---------------------------------------------------------------------------

def topo_order(output):
    """All nodes reachable from `output`, inputs before consumers."""
    order, seen, stack = [], set(), [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for t in node.inputs:
            if t.uid not in seen:
                stack.append((t, False))
    return order


def forward(output, bindings=None):
    """Re-evaluate the graph below `output`, optionally rebinding leaves.

    `bindings` maps leaf tensors to replacement numpy arrays (same shape and
    dtype).  Returns {node: value} for every node in the graph.  Repeated
    calls with identical bindings produce bitwise-identical values.
    """
    bindings = bindings or {}
    order = topo_order(output)
    vals = {}
    for node in order:
        if node.op is None:
            if node in bindings:
                arr = np.asarray(bindings[node], dtype=node.data.dtype)
                if arr.shape != node.shape:
                    raise GraphError(f"binding for {node.label()} has shape {arr.shape}, "
                                     f"expected {node.shape}")
                vals[node.uid] = arr
            else:
                vals[node.uid] = node.data
        else:
            value = _EVAL[node.op]([vals[t.uid] for t in node.inputs], node.attrs)
            _check_value(node.op, value, node.label())
            vals[node.uid] = value
    return {node: vals[node.uid] for node in order}


def backward(output, values=None):
    """Gradients of a scalar `output` w.r.t. every parameter leaf below it.

    `values` may be a {node: value} map from `forward` to differentiate at
    rebound inputs; by default the eagerly computed values are used.
    """
    if output.data.size != 1:
        raise GraphError(f"backward: output {output.label()} has shape {output.shape}, "
                         "expected a scalar")
    if values is None:
        vals = {}
        for node in topo_order(output):
            vals[node.uid] = node.data
    else:
        vals = {node.uid: v for node, v in values.items()}

    order = topo_order(output)
    adj = {output.uid: np.ones_like(vals[output.uid])}
    grads = {}
    for node in reversed(order):
        g = adj.pop(node.uid, None)
        if g is None or not node.requires_grad:
            continue
        if node.op is None:
            grads[node] = g
            continue
        for t, ig in zip(node.inputs, _vjp(node, g, vals)):
            if ig is None or not t.requires_grad:
                continue
            if t.uid in adj:
                adj[t.uid] = adj[t.uid] + ig
            else:
                adj[t.uid] = ig
    return grads


def grad_check(output, leaf, eps=1e-5, bindings=None):
    """Max relative error between analytic and central-difference gradients.

    Only meaningful in float64 mode; the relative error of component i is
    |analytic_i - fd_i| / max(1, |analytic_i|).
    """
    if output.data.dtype != np.float64:
        raise GraphError("grad_check requires the float64 precision mode")
    if not (1e-7 <= eps <= 1e-3):
        raise GraphError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    bindings = dict(bindings or {})
    base_vals = forward(output, bindings)
    analytic = backward(output, base_vals).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(leaf.data)

    base = np.array(bindings.get(leaf, leaf.data), dtype=np.float64)
    flat = base.ravel()
    worst = 0.0
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * eps
            bindings[leaf] = probe.reshape(base.shape)
            fd_val = forward(output, bindings)[output]
            if sign > 0:
                f_plus = float(fd_val)
            else:
                f_minus = float(fd_val)
        fd = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.ravel()[i])
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    bindings.pop(leaf, None)
    return worst
