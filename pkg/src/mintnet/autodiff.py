"""Minimal reverse-mode differentiation over the tensor kernels.

Forward values are computed eagerly. Every op accepts either plain arrays or
:class:`Var` handles; if none of its inputs is a ``Var`` the op returns a
plain ``ndarray`` and nothing is recorded. Model code is therefore written
once and runs untaped for inference and taped for training.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = mul(x, x)
    grads = tape.backward(y)
    grads[x.id]  # -> 6.0
"""

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import MintError, NonFiniteError, ShapeError


@dataclass(frozen=True)
class Activation:
    """A monotone activation with its first two derivatives."""

    kind: str
    h: Callable
    dh: Callable
    d2h: Callable


def _elu(u):
    return np.where(u > 0, u, np.expm1(np.minimum(u, 0.0)))


def _elu_d(u):
    return np.where(u > 0, 1.0, np.exp(np.minimum(u, 0.0)))


def _elu_d2(u):
    return np.where(u > 0, 0.0, np.exp(np.minimum(u, 0.0)))


def _tanh_d(u):
    th = np.tanh(u)
    return 1.0 - th * th


def _tanh_d2(u):
    th = np.tanh(u)
    return -2.0 * th * (1.0 - th * th)


ACTIVATIONS = {
    "elu": Activation("elu", _elu, _elu_d, _elu_d2),
    "tanh": Activation("tanh", np.tanh, _tanh_d, _tanh_d2),
}


def get_activation(kind):
    if isinstance(kind, Activation):
        return kind
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None


class _Node:
    __slots__ = ("op", "inputs", "value", "vjp")

    def __init__(self, op, inputs, value, vjp):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "id")
    # make ndarray (op) Var defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.value(self.id)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"


class Tape:
    """Append-only record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def leaf(self, value):
        value = np.array(value, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), value, None))
        self.leaves.append(node_id)
        return Var(self, node_id)

    def record(self, op, inputs, value, vjp):
        ids = []
        for v in inputs:
            if v.tape is not self:
                raise MintError(f"op {op!r} mixes variables from different tapes")
            ids.append(v.id)
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(ids), value, vjp))
        return Var(self, node_id)

    def value(self, node_id):
        if not 0 <= node_id < len(self.nodes):
            raise KeyError(f"unknown node id {node_id}")
        return self.nodes[node_id].value

    def backward(self, output):
        """Gradients of the scalar ``output`` with respect to every leaf, keyed by leaf id."""
        if output.tape is not self:
            raise MintError("output variable belongs to another tape")
        out = self.nodes[output.id].value
        if out.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
        pending = {output.id: np.ones_like(out)}
        result = {}
        for node_id in range(output.id, -1, -1):
            g = pending.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.vjp is None:
                result[node_id] = g
                continue
            for parent, pg in zip(node.inputs, node.vjp(g)):
                if parent in pending:
                    pending[parent] = pending[parent] + pg
                else:
                    pending[parent] = pg
        for leaf_id in self.leaves:
            if leaf_id not in result:
                result[leaf_id] = np.zeros_like(self.nodes[leaf_id].value)
        return result


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, value, ga, gb):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    inputs, fns = [], []
    if isinstance(a, Var):
        inputs.append(a)
        fns.append(ga)
    if isinstance(b, Var):
        inputs.append(b)
        fns.append(gb)
    return tape.record(op, inputs, value, lambda g: [f(g) for f in fns])


def add(a, b):
    av, bv = np.asarray(_val(a)), np.asarray(_val(b))
    return _binary(
        "add", a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b):
    av, bv = np.asarray(_val(a)), np.asarray(_val(b))
    return _binary(
        "sub", a, b, av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: -_unbroadcast(g, bv.shape),
    )


def mul(a, b):
    av, bv = np.asarray(_val(a)), np.asarray(_val(b))
    return _binary(
        "mul", a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def _unary(op, x, value, vjp):
    if not isinstance(x, Var):
        return value
    return x.tape.record(op, [x], value, lambda g: [vjp(g)])


def neg(x):
    return _unary("neg", x, -_val(x), lambda g: -g)


def exp(x):
    v = np.exp(_val(x))
    return _unary("exp", x, v, lambda g: g * v)


def log(x):
    xv = _val(x)
    return _unary("log", x, np.log(xv), lambda g: g / xv)


def square(x):
    xv = _val(x)
    return _unary("square", x, xv * xv, lambda g: 2.0 * g * xv)


def act(x, activation):
    """Apply ``h`` elementwise."""
    a = get_activation(activation)
    xv = _val(x)
    return _unary(f"{a.kind}", x, a.h(xv), lambda g: g * a.dh(xv))


def act_grad(x, activation):
    """Apply ``h'`` elementwise; its backward uses ``h''``."""
    a = get_activation(activation)
    xv = _val(x)
    return _unary(f"d{a.kind}", x, a.dh(xv), lambda g: g * a.d2h(xv))


def reshape(x, shape):
    xv = _val(x)
    return _unary("reshape", x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _unary("transpose", x, np.transpose(_val(x), axes), lambda g: np.transpose(g, inv))


def sum(x, axis=None):
    xv = _val(x)
    v = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        axes = (axis,) if isinstance(axis, int) else axis
        return np.broadcast_to(np.expand_dims(g, axes), xv.shape).copy()

    return _unary("sum", x, v, vjp)


def take(x, index):
    """Advanced indexing ``x[index]`` with ``index`` a tuple of integer arrays."""
    xv = _val(x)

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, index, g)
        return out

    return _unary("take", x, xv[index], vjp)


def einsum(subscripts, a, b):
    """Two-operand einsum with explicit output subscripts."""
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or not set(s) <= set(out) | set(other):
            raise ValueError(f"unsupported einsum operand {s!r} in {subscripts!r}")
    av, bv = _val(a), _val(b)
    return _binary(
        "einsum", a, b, np.einsum(subscripts, av, bv),
        lambda g: np.einsum(f"{out},{sb}->{sa}", g, bv),
        lambda g: np.einsum(f"{out},{sa}->{sb}", g, av),
    )


def conv2d(x, w):
    """Same-padded convolution, differentiable in both ``x`` and ``w``."""
    xv, wv = _val(x), _val(w)
    r = wv.shape[-1]
    return _binary(
        "conv2d", x, w, T.conv2d(xv, wv),
        lambda g: T.conv2d_grad_input(g, wv),
        lambda g: T.conv2d_grad_weight(xv, g, r),
    )


def value_of(x):
    """The numeric value of a ``Var`` or array."""
    return np.asarray(_val(x))


def grad_check(f, params, eps=1e-5, grad=None):
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps a dict of named arrays to a scalar. If ``grad`` (same keys) is
    not given it is computed by taping ``f``.
    Returns ``(max_rel_err, details)`` where ``details`` maps names to per-entry errors.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if grad is None:
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        out = f(leaves)
        if not isinstance(out, Var):
            grad = {k: np.zeros_like(v) for k, v in params.items()}
        else:
            gs = tape.backward(out)
            grad = {k: gs[leaves[k].id] for k in params}
    worst = 0.0
    details = {}
    for name, base in params.items():
        err = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params))
            flat[i] = orig - eps
            fm = float(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"f is not finite when perturbing {name}[{i}]")
            cd = (fp - fm) / (2 * eps)
            an = float(grad[name].reshape(-1)[i])
            err.reshape(-1)[i] = abs(an - cd) / (abs(an) + abs(cd) + 1e-8)
        details[name] = err
        if err.size:
            worst = max(worst, float(err.max()))
    return worst, details
