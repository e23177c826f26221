"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every node holds an array value (a 0-d array plays the role of a scalar).
Input derivatives of a network are obtained by pushing truncated Taylor
jets forward through the network *using taped primitives*, so any loss
built from those derivative values can be differentiated again with
respect to the network parameters by a single reverse sweep
(forward-over-reverse).

Usage::

    with Tape() as tape:
        w = tape.var(np.array([1.0, 2.0]))
        loss = (w * w).sum()
    tape.gradient(loss, w)   # -> array([2., 4.])
"""
from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node", "Tape", "Jet2", "DomainError", "NonFiniteError", "UnsupportedOperation",
    "active_tape", "record", "grad",
    "tanh", "exp", "log", "sin", "cos", "sqrt", "log_sigmoid", "sigmoid",
    "square", "matmul", "concat", "value_of", "input_jet", "input_jet_composed",
    "dense_forward", "activate", "ACTIVATIONS",
]


class DomainError(ArithmeticError):
    """A primitive was evaluated outside its domain."""

    def __init__(self, primitive: str, operand):
        self.primitive = primitive
        self.operand = operand
        super().__init__(f"{primitive}: operand {operand!r} outside domain")


class NonFiniteError(FloatingPointError):
    """A loss or gradient entry is NaN/inf."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message)


class UnsupportedOperation(NotImplementedError):
    pass


_local = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    """A value recorded on a tape.

    ``parents`` are the nodes this value was computed from and ``vjp`` maps
    the output cotangent to a tuple of parent cotangents (``None`` for
    parents that need no gradient).
    """

    __slots__ = ("value", "_tape", "index", "parents", "vjp", "needs_grad", "name", "key")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape: Tape, parents=(), vjp=None, needs_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        # weak: the tape owns its nodes, so a strong back-reference would make
        # every tape a reference cycle that only the cyclic collector frees
        self._tape = weakref.ref(tape)
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad
        self.name = name
        self.key = None  # set on indexing nodes: gradient is scattered into the parent
        self.index = tape._append(self)

    @property
    def tape(self) -> Tape:
        tape = self._tape()
        if tape is None:
            raise RuntimeError("node outlived its tape")
        return tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape}, value={self.value if self.value.size < 5 else '...'})"

    def __float__(self):
        return float(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, exponent):
        return _pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return _transpose(self)

    def sum(self, axis=None):
        return _sum(self, axis)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return _sum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Tape:
    """Linear record of nodes in creation order (a valid topological order)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def var(self, value, name: str | None = None) -> Node:
        return Node(np.array(value, dtype=np.float64), self, needs_grad=True, name=name)

    def const(self, value) -> Node:
        return Node(value, self)

    def gradient(self, loss: Node, wrt: Node | Sequence[Node]):
        """d(loss)/d(wrt) by one reverse sweep; ``loss`` must be 0-d."""
        single = isinstance(wrt, Node)
        targets = [wrt] if single else list(wrt)
        if loss.value.size != 1:
            raise ValueError("loss must be a scalar node")
        if not np.isfinite(loss.value).all():
            raise NonFiniteError(f"loss is not finite ({float(loss.value)}); backward pass refused")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        owned: set[int] = set()
        stop = min(t.index for t in targets)
        for node in reversed(self.nodes[stop:loss.index + 1]):
            g = grads.pop(node.index, None) if node.vjp is not None else grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            if node.key is not None:
                # scatter straight into one parent buffer instead of a dense zero array per slice
                parent = node.parents[0]
                buf = grads.get(parent.index)
                if buf is None:
                    buf = np.zeros(parent.value.shape)
                elif parent.index not in owned:
                    buf = buf.copy()
                owned.add(parent.index)
                if _fancy(node.key):
                    np.add.at(buf, node.key, g)
                else:
                    buf[node.key] += g
                grads[parent.index] = buf
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.needs_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                    owned.add(parent.index)
                else:
                    grads[parent.index] = pg
        out = [grads.get(t.index, np.zeros_like(t.value)) for t in targets]
        return out[0] if single else out


# --------------------------------------------------------------------------
# primitive helpers

def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return Node(x, tape)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _make(value, parents: tuple, vjp: Callable) -> Node:
    tape = parents[0].tape
    needs = any(p.needs_grad for p in parents)
    return Node(value, tape, parents, vjp if needs else None, needs)


def _add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _neg(a):
    if not isinstance(a, Node):
        return np.negative(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def _mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if a.needs_grad else None,
                _unbroadcast(g * av, bv.shape) if b.needs_grad else None)
    return _make(av * bv, (a, b), vjp)


def _div(a, b):
    bv = value_of(b)
    if np.any(bv == 0.0):
        raise DomainError("div", float(bv.flat[np.flatnonzero(bv == 0.0)[0]]))
    tape = _tape_of(a, b)
    if tape is None:
        return np.divide(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av = a.value
    out = av / bv

    def vjp(g):
        return (_unbroadcast(g / bv, av.shape) if a.needs_grad else None,
                _unbroadcast(-g * out / bv, bv.shape) if b.needs_grad else None)
    return _make(out, (a, b), vjp)


def _pow(a, exponent):
    if isinstance(exponent, Node):
        return exp(exponent * log(a))
    p = float(exponent)
    av = value_of(a)
    if p != int(p) and np.any(av < 0):
        raise DomainError("pow", float(av.min()))
    if p < 0 and np.any(av == 0):
        raise DomainError("pow", 0.0)
    if not isinstance(a, Node):
        return np.power(av, p)
    out = np.power(av, p)

    def vjp(g):
        # an infinite slope (x**0.5 at 0) is caught by the non-finite check in the sweep
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * np.power(av, p - 1.0),)
    return _make(out, (a,), vjp)


def _unary(name, f, df_from_x_y):
    """Build an elementwise primitive; ``df_from_x_y(x, y)`` gives f'(x)."""
    def op(a):
        if not isinstance(a, Node):
            return f(np.asarray(a, dtype=np.float64))
        av = a.value
        y = f(av)
        return _make(y, (a,), lambda g: (g * df_from_x_y(av, y),))
    op.__name__ = name
    op.__doc__ = f"Elementwise {name}; accepts nodes or plain arrays."
    return op


tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
exp = _unary("exp", np.exp, lambda x, y: y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))


def _stable_sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


sigmoid = _unary("sigmoid", _stable_sigmoid, lambda x, y: y * (1.0 - y))
log_sigmoid = _unary("log_sigmoid", lambda x: -np.logaddexp(0.0, -x), lambda x, y: _stable_sigmoid(-x))
_log = _unary("log", np.log, lambda x, y: 1.0 / x)
_sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)


def log(a):
    v = value_of(a)
    if np.any(v <= 0.0):
        raise DomainError("log", float(v.flat[np.flatnonzero(v <= 0.0)[0]]))
    return _log(a)


def sqrt(a):
    v = value_of(a)
    if np.any(v < 0.0):
        raise DomainError("sqrt", float(v.flat[np.flatnonzero(v < 0.0)[0]]))
    if isinstance(a, Node) and a.needs_grad and np.any(v == 0.0):
        raise DomainError("sqrt", 0.0)
    return _sqrt(a)


def square(a):
    return a * a


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value

    def vjp(g):
        ga = gb = None
        if a.needs_grad:
            ga = g @ bv.T if bv.ndim == 2 else np.multiply.outer(g, bv)
        if b.needs_grad:
            if bv.ndim == 1:
                gb = av.T @ g
            elif av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:  # stacked (..., n) @ (n, m): reduce over all leading axes
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _make(av @ bv, (a, b), vjp)


def _sum(a, axis):
    if not isinstance(a, Node):
        return np.sum(a, axis=axis)
    shape = a.value.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(a.value.sum(axis=axis), (a,), vjp)


def _getitem(a: Node, key):
    out = _make(a.value[key], (a,), lambda g: None)
    out.key = key
    return out


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def _reshape(a: Node, shape):
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _transpose(a: Node):
    return _make(a.value.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence, axis: int = 0):
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    nodes = [_lift(p, tape) for p in parts]
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def record(f: Callable, *inputs):
    """Evaluate ``f`` on ``inputs``; taped inputs make the result a taped node."""
    tape = _tape_of(*inputs)
    if tape is None:
        return f(*inputs)
    return f(*[_lift(x, tape) for x in inputs])


def grad(loss: Node, wrt: Node, names: Sequence[str] | None = None) -> np.ndarray:
    """Gradient of a scalar ``loss`` w.r.t. a (flat) parameter node.

    Raises :class:`NonFiniteError` for a non-finite loss (before the sweep)
    or for any non-finite gradient entry, naming its flat offset.
    """
    g = loss.tape.gradient(loss, wrt)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        off = int(bad[0])
        label = f" ({names[off]})" if names is not None else ""
        raise NonFiniteError(f"non-finite gradient at parameter offset {off}{label}", offset=off)
    return g


# --------------------------------------------------------------------------
# input jets

@dataclass
class Jet2:
    """Value and input partials of one network output over a batch of points.

    ``grad[i]`` is d/dx_i and ``hess[(i, j)]`` is d²/dx_i dx_j (i <= j) for
    the requested directions; every entry may be a taped node.
    """
    value: object
    grad: dict = field(default_factory=dict)
    hess: dict = field(default_factory=dict)

    def d(self, i: int):
        return self.grad[i]

    def dd(self, i: int, j: int | None = None):
        j = i if j is None else j
        return self.hess[(min(i, j), max(i, j))]


def _tanh_derivs(z):
    t = np.tanh(z)
    s1 = 1.0 - t * t
    s2 = -2.0 * t * s1
    return t, s1, s2, (6.0 * t * t - 2.0) * s1


def _sine_derivs(z):
    s, c = np.sin(z), np.cos(z)
    return s, c, -s, -c


def _relu_derivs(z):
    return np.maximum(z, 0.0), (z > 0).astype(np.float64), None, None


# name -> z -> (f, df, d2f, d3f) elementwise; None marks an order the activation lacks
ACTIVATIONS = {"tanh": _tanh_derivs, "sine": _sine_derivs, "relu": _relu_derivs}


def activate(z, activation: str = "tanh"):
    """Plain activation f(z) for nodes or arrays (no jet)."""
    if activation == "tanh":
        return tanh(z)
    if activation == "sine":
        return sin(z)
    if activation == "relu":
        mask = (value_of(z) > 0).astype(np.float64)
        return z * mask
    raise KeyError(activation)


def _jet_layout(directions, pairs):
    # slot 0: value; 1..D: first partials; then one slot per second-order pair
    first = {i: 1 + k for k, i in enumerate(directions)}
    second = {p: 1 + len(directions) + k for k, p in enumerate(pairs)}
    return first, second


def _activate_jet(Z, activation: str, first: dict, second: dict):
    """Map a stacked pre-activation jet (K, N, m) to the post-activation jet.

    Slot semantics: value, d/dx_i, d²/dx_i dx_j (chain rule to second order).
    Recorded as a single primitive with a hand-written vjp.
    """
    derivs = ACTIVATIONS[activation]
    Zv = value_of(Z)
    f0, f1, f2, f3 = derivs(Zv[0])
    if second and f2 is None:
        raise UnsupportedOperation(f"activation {activation!r} has no second derivative")
    out = np.empty_like(Zv)
    out[0] = f0
    for i, k in first.items():
        out[k] = f1 * Zv[k]
    for (i, j), k in second.items():
        out[k] = f2 * Zv[first[i]] * Zv[first[j]] + f1 * Zv[k]
    if not isinstance(Z, Node):
        return out

    def vjp(G):
        if first and f2 is None:
            raise UnsupportedOperation(f"activation {activation!r} has no second derivative")
        if second and f3 is None:
            raise UnsupportedOperation(f"activation {activation!r} has no third derivative")
        dZ = np.empty_like(Zv)
        d0 = G[0] * f1
        for i, k in first.items():
            dZ[k] = G[k] * f1
            d0 += G[k] * Zv[k] * f2
        for (i, j), k in second.items():
            zi, zj = Zv[first[i]], Zv[first[j]]
            gk = G[k]
            dZ[k] = gk * f1
            d0 += gk * (f3 * zi * zj + f2 * Zv[k])
            dZ[first[i]] += gk * f2 * zj
            dZ[first[j]] += gk * f2 * zi
        dZ[0] = d0
        return (dZ,)
    return _make(out, (Z,), vjp)


def _jet_affine(inp, W, b):
    """Stacked jet through ``x @ W.T + b``: the bias only enters the value slot."""
    tape = _tape_of(inp, W, b)
    iv, Wv, bv = value_of(inp), value_of(W), value_of(b)
    out = iv @ Wv.T
    out[0] += bv
    if tape is None:
        return out
    inp, W, b = _lift(inp, tape), _lift(W, tape), _lift(b, tape)

    def vjp(G):
        return (G @ Wv if inp.needs_grad else None,
                G.reshape(-1, G.shape[-1]).T @ iv.reshape(-1, iv.shape[-1]) if W.needs_grad else None,
                G[0].sum(axis=0) if b.needs_grad else None)
    return _make(out, (inp, W, b), vjp)


def _resolve_pairs(directions, order, second):
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    pairs = []
    if order == 2:
        for item in (directions if second is None else second):
            i, j = (item, item) if np.isscalar(item) else item
            if i not in directions or j not in directions:
                raise ValueError(f"second derivative ({i},{j}) needs both directions declared")
            pairs.append((min(i, j), max(i, j)))
    return pairs


def input_jet(layers: Sequence[tuple], points, directions: Sequence[int], order: int = 1,
              activation: str = "tanh", second: Sequence | None = None) -> list[Jet2]:
    """Push a second-order jet through a dense network.

    ``layers`` is a list of ``(W, b)`` with ``W`` of shape (out, in); entries
    may be taped nodes.  ``points`` is an (N, d) array.  First partials are
    produced for every index in ``directions``.  With ``order=2``, second
    partials are produced for ``second`` (default: pure second derivative in
    every direction); items are ints (pure) or ``(i, j)`` pairs (mixed).
    Returns one :class:`Jet2` per network output column.

    The jet is carried as one stacked array (K, N, width) so each layer costs
    a single matmul and a single fused activation primitive.
    """
    directions = list(directions)
    pairs = _resolve_pairs(directions, order, second)
    first, sec = _jet_layout(directions, pairs)
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    K = 1 + len(first) + len(sec)
    seed = np.zeros((K, n, d))
    seed[0] = x
    for i, k in first.items():
        seed[k, :, i] = 1.0

    Z = None
    for li, (W, b) in enumerate(layers):
        inp = seed if li == 0 else _activate_jet(Z, activation, first, sec)
        Z = _jet_affine(inp, W, b)
    jets = []
    for o in range(value_of(Z).shape[2]):
        jets.append(Jet2(
            value=Z[0, :, o],
            grad={i: Z[k, :, o] for i, k in first.items()},
            hess={p: Z[k, :, o] for p, k in sec.items()},
        ))
    return jets


def input_jet_composed(layers: Sequence[tuple], points, directions: Sequence[int], order: int = 1,
                       activation: str = "tanh", second: Sequence | None = None) -> list[Jet2]:
    """Same contract as :func:`input_jet`, built only from elementwise primitives.

    Slower; kept as an independent cross-check of the fused activation vjp.
    """
    if activation not in ("tanh", "sine"):
        raise UnsupportedOperation(f"composed jet has no rule for {activation!r}")
    directions = list(directions)
    pairs = _resolve_pairs(directions, order, second)
    x = np.asarray(points, dtype=np.float64)

    def act(z):
        if activation == "tanh":
            t = tanh(z)
            s1 = 1.0 - t * t
            return t, s1, -2.0 * t * s1
        s = sin(z)
        return s, cos(z), -s

    W0, b0 = layers[0]
    z = matmul(x, W0.T) + b0
    dz = {i: W0[:, i] + np.zeros((x.shape[0], 1)) for i in directions}
    ddz: dict = {p: None for p in pairs}
    for W, b in layers[1:]:
        a, s1, s2 = act(z)
        da = {i: s1 * dz[i] for i in directions}
        dda = {}
        for (i, j) in pairs:
            term = s2 * dz[i] * dz[j]
            dda[(i, j)] = term if ddz[(i, j)] is None else term + s1 * ddz[(i, j)]
        z = matmul(a, W.T) + b
        dz = {i: matmul(da[i], W.T) for i in directions}
        ddz = {p: matmul(dda[p], W.T) for p in pairs}
    n_out = value_of(z).shape[1]
    zero = np.zeros(x.shape[0])
    return [Jet2(value=z[:, k],
                 grad={i: dz[i][:, k] for i in directions},
                 hess={p: (zero if ddz[p] is None else ddz[p][:, k]) for p in pairs})
            for k in range(n_out)]


def dense_forward(layers: Sequence[tuple], points, activation: str = "tanh"):
    """Plain forward pass; works on arrays or taped nodes."""
    a = np.asarray(points, dtype=np.float64)
    for li, (W, b) in enumerate(layers):
        if li:
            a = activate(a, activation)
        a = matmul(a, W.T) + b
    return a
