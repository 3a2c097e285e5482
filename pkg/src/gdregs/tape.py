"""Define-by-run reverse-mode automatic differentiation.

Values are float64 numpy arrays. Elementwise primitives broadcast over leading
axes (the batch / importance-sample / replicate axes used downstream); the
matching backward rule sums the adjoint back to the input's shape.

A ``Node`` doubles as the node reference handed to user code, and supports the
usual arithmetic operators::

    tape = Tape()
    x = tape.parameter(2.0, "x")
    y = tape.parameter(3.0, "y")
    f = x * y + y
    backward(f)          # {"x": 3.0, "y": 3.0}
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "log", "exp", "tanh", "softplus",
    "square", "sum", "dot", "affine", "logsumexp", "concat", "index",
    "reshape", "broadcast_to", "stop_gradient",
)


class DomainError(ValueError):
    """A primitive was evaluated outside its domain (log of x <= 0, x / 0, overflow)."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Node:
    """One recorded value on a tape.

    ``vjps`` holds one vector-Jacobian product per parent; ``None`` marks an
    edge that carries no gradient (the stop-gradient barrier).
    """

    __slots__ = ("tape", "id", "value", "op", "parent_ids", "vjps")
    __array_ufunc__ = None  # make ``ndarray <op> Node`` defer to Node's reflected ops

    def __init__(self, tape, id_, value, op, parent_ids, vjps):
        self.tape = tape
        self.id = id_
        self.value = value
        self.op = op
        self.parent_ids = parent_ids
        self.vjps = vjps

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Append-only record of a computation.

    Args:
        replay: optional sequence of values substituted, in creation order, for
            the outputs of ``stop_gradient``. Used to evaluate a function with its
            barrier inputs frozen at a reference point.
    """

    def __init__(self, replay: Sequence[np.ndarray] | None = None):
        self.nodes: list[Node] = []
        self.parameter_ids: dict[str, int] = {}
        self.barrier_values: list[np.ndarray] = []
        self._replay = None if replay is None else iter(replay)

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, value, op, parents=(), vjps=()) -> Node:
        node = Node(self, len(self.nodes), value, op, tuple(p.id for p in parents), tuple(vjps))
        self.nodes.append(node)
        return node

    def parameter(self, value, name: str) -> Node:
        """Register a trainable leaf under ``name``."""
        if name in self.parameter_ids:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        node = self._record(np.array(value, dtype=np.float64), "parameter")
        self.parameter_ids[name] = node.id
        return node

    def constant(self, value) -> Node:
        return self._record(np.asarray(value, dtype=np.float64), "constant")

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)


def _tape_of(args: Iterable) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a tape Node")


def _lift_all(*args) -> tuple[Tape, list[Node]]:
    tape = _tape_of(args)
    return tape, [tape.lift(a) for a in args]


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{op} produced a non-finite value")
    return value


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Node:
    tape, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return tape._record(a.value + b.value, "add", (a, b),
                        (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return tape._record(a.value - b.value, "sub", (a, b),
                        (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    tape, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    return tape._record(av * bv, "mul", (a, b),
                        (lambda g: _unbroadcast(g * bv, av.shape),
                         lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv
    return tape._record(out, "div", (a, b),
                        (lambda g: _unbroadcast(g / bv, av.shape),
                         lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Node) -> Node:
    return a.tape._record(-a.value, "neg", (a,), (lambda g: -g,))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0.0):
        raise DomainError("log of a non-positive value")
    return a.tape._record(np.log(av), "log", (a,), (lambda g: g / av,))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.value), "exp")
    return a.tape._record(out, "exp", (a,), (lambda g: g * out,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape._record(out, "tanh", (a,), (lambda g: g * (1.0 - out * out),))


def softplus(a: Node) -> Node:
    av = a.value
    out = np.log1p(np.exp(-np.abs(av))) + np.maximum(av, 0.0)
    return a.tape._record(out, "softplus", (a,), (lambda g: g * expit(av),))


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record(av * av, "square", (a,), (lambda g: 2.0 * g * av,))


# -- reductions and structure --------------------------------------------------

def sum(a: Node, axis: int | tuple | None = None) -> Node:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return a.tape._record(np.sum(a.value, axis=axis), "sum", (a,), (vjp,))


def dot(a, b) -> Node:
    """Inner product over the last axis."""
    tape, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    return tape._record(np.sum(av * bv, axis=-1), "dot", (a, b),
                        (lambda g: _unbroadcast(g[..., None] * bv, av.shape),
                         lambda g: _unbroadcast(g[..., None] * av, bv.shape)))


def affine(w, x, b=None) -> Node:
    """``w @ x + b`` over the last axis of ``x``.

    ``w`` is either ``(out, in)``, shared by every row of ``x``, or a replicated
    stack ``(R, out, in)`` where ``x`` has leading axis ``R`` (or 1, to share the
    input) and replicate ``r`` uses ``w[r]``. With a stack, ``b`` may be
    ``(out,)`` or ``(R, out)``.
    """
    args = (w, x) if b is None else (w, x, b)
    tape, nodes = _lift_all(*args)
    w, x = nodes[0], nodes[1]
    wv, xv = w.value, x.value
    if wv.shape[-1] != xv.shape[-1]:
        raise ValueError(f"affine: weight {wv.shape} incompatible with input {xv.shape}")
    if wv.ndim == 2:
        # one flat GEMM; matmul on stacked leading axes would loop over them
        out = (xv.reshape(-1, xv.shape[-1]) @ wv.T).reshape(xv.shape[:-1] + (wv.shape[0],))

        def vjp_w(g):
            xb = np.broadcast_to(xv, g.shape[:-1] + xv.shape[-1:])
            return g.reshape(-1, g.shape[-1]).T @ xb.reshape(-1, xv.shape[-1])

        def vjp_x(g):
            gx = (g.reshape(-1, g.shape[-1]) @ wv).reshape(g.shape[:-1] + (wv.shape[1],))
            return _unbroadcast(gx, xv.shape)

        vjps = [vjp_w, vjp_x]
        if b is not None:
            bv_shape = nodes[2].shape
            out = out + nodes[2].value
            vjps.append(lambda g: _unbroadcast(g, bv_shape))
        return tape._record(out, "affine", nodes, vjps)

    if wv.ndim != 3 or xv.ndim < 2 or xv.shape[0] not in (1, wv.shape[0]):
        raise ValueError(f"affine: weight stack {wv.shape} needs input with leading axis "
                         f"{wv.shape[0]} or 1, got {xv.shape}")
    reps, n_out, n_in = wv.shape
    x2 = xv.reshape(xv.shape[0], -1, n_in)
    out2 = x2 @ np.swapaxes(wv, 1, 2)
    out_shape = (reps,) + xv.shape[1:-1] + (n_out,)

    def vjp_w(g):
        g2 = g.reshape(reps, -1, n_out)
        if x2.shape[0] == 1:
            return np.swapaxes(g2, 1, 2) @ x2[0]
        return np.swapaxes(g2, 1, 2) @ x2

    def vjp_x(g):
        gx = g.reshape(reps, -1, n_out) @ wv
        if x2.shape[0] == 1:
            gx = gx.sum(axis=0, keepdims=True)
        return gx.reshape(xv.shape)

    vjps = [vjp_w, vjp_x]
    if b is not None:
        bv = nodes[2].value
        if bv.ndim == 1:
            out2 = out2 + bv
            vjps.append(lambda g: g.reshape(-1, n_out).sum(axis=0))
        elif bv.shape == (reps, n_out):
            out2 = out2 + bv[:, None, :]
            vjps.append(lambda g: g.reshape(reps, -1, n_out).sum(axis=1))
        else:
            raise ValueError(f"affine: bias {bv.shape} incompatible with weight stack {wv.shape}")
    return tape._record(out2.reshape(out_shape), "affine", nodes, vjps)


def logsumexp(a: Node, axis: int = -1) -> Node:
    """Max-shifted log-sum-exp along ``axis``."""
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out_keep = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    out = np.squeeze(out_keep, axis=axis)

    def vjp(g):
        return np.expand_dims(g, axis) * np.exp(av - out_keep)

    return a.tape._record(out, "logsumexp", (a,), (vjp,))


def concat(parts: Sequence, axis: int = -1) -> Node:
    """Concatenate along the last axis, broadcasting the leading axes."""
    if axis != -1:
        raise NotImplementedError("concat only supports the last axis")
    tape, nodes = _lift_all(*parts)
    lead = np.broadcast_shapes(*(n.shape[:-1] for n in nodes))
    values = [np.broadcast_to(n.value, lead + n.shape[-1:]) for n in nodes]
    out = np.concatenate(values, axis=-1)
    vjps = []
    start = 0
    for n in nodes:
        stop = start + n.shape[-1]
        vjps.append(lambda g, s=start, e=stop, shp=n.shape: _unbroadcast(g[..., s:e], shp))
        start = stop
    return tape._record(out, "concat", nodes, vjps)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def index(a: Node, key) -> Node:
    av = a.value
    basic = _is_basic_key(key)

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return out

    return a.tape._record(np.array(av[key]), "index", (a,), (vjp,))


def reshape(a: Node, shape: tuple) -> Node:
    src = a.shape
    return a.tape._record(np.reshape(a.value, shape), "reshape", (a,),
                          (lambda g: np.reshape(g, src),))


def broadcast_to(a: Node, shape: tuple) -> Node:
    src = a.shape
    return a.tape._record(np.broadcast_to(a.value, shape), "broadcast_to", (a,),
                          (lambda g: _unbroadcast(g, src),))


def stop_gradient(a: Node) -> Node:
    """Identity on values; contributes no adjoint to ``a``."""
    tape = a.tape
    value = a.value
    if tape._replay is not None:
        frozen = next(tape._replay)
        if frozen.shape != value.shape:
            raise ValueError("replayed barrier value has the wrong shape")
        value = frozen
    tape.barrier_values.append(value)
    return tape._record(value, "stop_gradient", (a,), (None,))


_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "log": log,
    "exp": exp, "tanh": tanh, "softplus": softplus, "square": square, "sum": sum,
    "dot": dot, "affine": affine, "logsumexp": logsumexp,
    "concat": lambda *xs, **kw: concat(xs, **kw), "index": index,
    "reshape": reshape, "broadcast_to": broadcast_to, "stop_gradient": stop_gradient,
}


def apply_primitive(tape: Tape, op: str, inputs: Sequence, **kwargs) -> Node:
    """Apply primitive ``op`` (one of ``PRIMITIVES``) to ``inputs``."""
    if op not in _DISPATCH:
        raise ValueError(f"unknown primitive {op!r}")
    nodes = [tape.lift(x) for x in inputs]
    return _DISPATCH[op](*nodes, **kwargs)


# -- reverse sweep -------------------------------------------------------------

def backward(output: Node, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Total derivative of a scalar ``output`` with respect to registered parameters.

    Only edges leading to a requested parameter are traversed, so asking for a
    single parameter group skips unrelated vector-Jacobian products. Parameters
    the output does not depend on get an exact zero adjoint.
    """
    tape = output.tape
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    names = list(tape.parameter_ids) if wrt is None else list(wrt)
    for name in names:
        if name not in tape.parameter_ids:
            raise KeyError(f"unknown parameter {name!r}")
    targets = {tape.parameter_ids[name] for name in names}

    n = output.id + 1
    nodes = tape.nodes
    live = [False] * n
    for node in nodes[:n]:
        if node.id in targets:
            live[node.id] = True
        else:
            live[node.id] = any(live[p] for p, v in zip(node.parent_ids, node.vjps) if v is not None)

    adjoint: list[np.ndarray | None] = [None] * n
    if live[output.id]:
        adjoint[output.id] = np.ones_like(output.value)
    for i in range(output.id, -1, -1):
        g = adjoint[i]
        if g is None:
            continue
        node = nodes[i]
        for p, vjp in zip(node.parent_ids, node.vjps):
            if vjp is None or not live[p]:
                continue
            contribution = vjp(g)
            adjoint[p] = contribution if adjoint[p] is None else adjoint[p] + contribution

    grads = {}
    for name in names:
        pid = tape.parameter_ids[name]
        g = adjoint[pid] if pid < n else None
        grads[name] = np.zeros_like(nodes[pid].value) if g is None else np.array(g, dtype=np.float64)
    return grads


def finite_difference_check(
    f: Callable[[Node], Node],
    x0,
    h: float = 1e-5,
    respect_barriers: bool = False,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` maps a parameter node to a scalar node. With ``respect_barriers`` the
    perturbed evaluations replay the stop-gradient values of the reference
    evaluation, so the comparison is against the function the backward pass
    actually differentiates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x0, dtype=np.float64)
    tape = Tape()
    out = f(tape.parameter(x0, "x"))
    grad = backward(out, ["x"])["x"]
    frozen = list(tape.barrier_values) if respect_barriers else None

    def evaluate(x):
        t = Tape(replay=frozen)
        return float(f(t.parameter(x, "x")).value)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        fd = (evaluate((flat + step).reshape(x0.shape)) - evaluate((flat - step).reshape(x0.shape))) / (2 * h)
        g = grad.reshape(-1)[i]
        worst = max(worst, abs(fd - g) / max(abs(g), 1e-8))
    return worst


def random_graph(seed: int, depth: int = 6, width: int = 64) -> tuple[Callable[[Node], Node], np.ndarray]:
    """A random smooth scalar function of a vector, plus a point to check it at.

    Used by the gradient-check suite. Constants are baked into the closure so
    repeated calls evaluate the same function. Layers avoid saturation and
    stationary points so no gradient coordinate falls to the finite-difference
    roundoff floor (about 1e-11 absolute at h=1e-5).
    """
    rng = np.random.default_rng(seed)
    in_dim = int(rng.integers(2, max(3, width // 4) + 1))
    x0 = 0.5 * rng.normal(size=in_dim)
    plan = []
    dim = in_dim
    for layer in range(int(rng.integers(1, depth + 1))):
        kinds = ["affine_tanh", "softplus", "mul", "exp_tanh", "log_softplus", "square", "concat"]
        kind = "affine_tanh" if layer == 0 else rng.choice(kinds)
        out = int(rng.integers(in_dim if layer == 0 else 2, width + 1))
        if kind == "affine_tanh":
            plan.append((kind, 0.7 * rng.normal(size=(out, dim)) / np.sqrt(dim), 0.3 * rng.normal(size=out)))
            dim = out
        elif kind == "concat":
            if 2 * dim <= width:
                plan.append((kind, None, None))
                dim = 2 * dim
        else:
            plan.append((kind, None, None))
    head = rng.choice(["sum", "logsumexp", "dot"])
    coef = rng.normal(size=dim)

    def f(x: Node) -> Node:
        h = x
        for kind, w, b in plan:
            if kind == "affine_tanh":
                h = tanh(affine(w, h, b))
            elif kind == "softplus":
                h = softplus(h)
            elif kind == "mul":
                h = h * (1.0 + 0.5 * tanh(h))
            elif kind == "exp_tanh":
                h = exp(0.5 * tanh(h))
            elif kind == "log_softplus":
                h = log(softplus(h) + 1.0)
            elif kind == "square":
                h = 0.25 * square(tanh(h) + 2.0)
            elif kind == "concat":
                h = concat([h, tanh(h)])
        if head == "sum":
            return sum(h * coef)
        if head == "logsumexp":
            return logsumexp(h * coef, axis=-1)
        return dot(h, coef)

    return f, x0
