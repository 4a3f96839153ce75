"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its nodes in execution
order, so the list is already topologically sorted; :meth:`Tape.backward`
walks it in reverse and accumulates vector-Jacobian products.

Arrays may carry leading batch (and time) axes. Matrix-style primitives act
on the last axis, e.g. ``matvec(W, x)`` is ``x @ W.T`` for ``x`` of shape
``(..., n)``. Elementwise binary ops follow numpy broadcasting, which is
how biases get added to batched activations.

Besides the textbook primitives there are a few fused ones (``linear``,
``gru_cell``, ``gauss_logpdf``, ``gauss_kl``) with hand-written gradients.
They exist for numerical stability and to keep the tape short enough that
training in pure numpy is practical.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = square(x)
    tape.backward(y)
    x.grad  # -> 6.0
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ShapeError

LOG_2PI = math.log(2.0 * math.pi)


class ProbeError(RuntimeError):
    """A finite-difference probe hit a non-finite value or a kink."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class Node:
    __slots__ = ("tape", "value", "grad", "kind", "inputs", "attrs", "cache", "requires_grad", "name")

    def __init__(self, tape, value, kind, inputs=(), attrs=None, cache=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.cache = cache
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.kind}{label}, shape={self.value.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return slice_(self, idx.start, idx.stop)
        return index(self, idx)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable
    n_inputs: int | None  # None means variadic


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name, n_inputs=None):
    def register(pair):
        fwd, vjp = pair()
        PRIMITIVES[name] = Primitive(fwd, vjp, n_inputs)
        return pair

    return register


class Tape:
    """Append-only record of nodes; single-threaded by design."""

    def __init__(self):
        self.nodes: list[Node] = []

    def clear(self) -> None:
        """Drop every recorded node; nodes and tape reference each other, so long loops should call this."""
        for n in self.nodes:
            n.inputs = ()
            n.cache = None
        self.nodes = []

    def leaf(self, value, name=None) -> Node:
        """A differentiable input (parameter or point of evaluation)."""
        node = Node(self, np.array(value, dtype=float), "leaf", requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def const(self, value, name=None) -> Node:
        node = Node(self, np.asarray(value, dtype=float), "const", name=name)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def apply(self, kind: str, *inputs, **attrs) -> Node:
        prim = PRIMITIVES[kind]
        if prim.n_inputs is not None and len(inputs) != prim.n_inputs:
            raise TypeError(f"{kind} takes {prim.n_inputs} inputs, got {len(inputs)}")
        nodes = tuple(self._lift(x) for x in inputs)
        value, cache = prim.forward([n.value for n in nodes], attrs)
        node = Node(
            self,
            value,
            kind,
            nodes,
            attrs,
            cache,
            requires_grad=any(n.requires_grad for n in nodes),
        )
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(node) into ``.grad`` of every node."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1 or root.value.ndim != 0:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        for n in self.nodes:
            n.grad = None
        root.grad = np.ones_like(root.value)
        stop = self.nodes.index(root) if self.nodes[-1] is not root else len(self.nodes) - 1
        owned = set()  # ids of nodes whose grad array may be updated in place
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or not node.inputs or not node.requires_grad:
                continue
            prim = PRIMITIVES[node.kind]
            in_grads = prim.vjp(node.grad, [n.value for n in node.inputs], node.value, node.cache, node.attrs)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if isinstance(g, _Scatter):
                    if id(inp) not in owned:
                        inp.grad = np.zeros_like(inp.value) if inp.grad is None else np.array(inp.grad)
                        owned.add(id(inp))
                    inp.grad[g.index] += g.value
                elif inp.grad is None:
                    inp.grad = np.asarray(g, dtype=float)
                else:
                    inp.grad = inp.grad + g
                    owned.add(id(inp))
        for n in self.nodes:
            if n.requires_grad and n.grad is None:
                n.grad = np.zeros_like(n.value)


def forward(kind: str, *inputs, tape: Tape | None = None, **attrs) -> Node:
    """Apply primitive ``kind``; the tape is taken from the first Node input."""
    if tape is None:
        tape = next((x.tape for x in inputs if isinstance(x, Node)), None)
        if tape is None:
            raise ValueError("forward needs a tape or at least one Node input")
    return tape.apply(kind, *inputs, **attrs)


def backward(tape: Tape, root: Node) -> dict[str, np.ndarray]:
    """Run the backward pass and return the gradients of named leaves."""
    tape.backward(root)
    return {n.name: n.grad for n in tape.nodes if n.kind == "leaf" and n.name is not None}


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


class _Scatter:
    """Gradient that is zero except at ``index``; added in place by the tape."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index, self.value = index, value


# ---------------------------------------------------------------------------
# elementwise binary


@primitive("add", 2)
def _add():
    def fwd(v, a):
        _check_broadcast("add", v[0], v[1])
        return v[0] + v[1], None

    def vjp(g, v, out, cache, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)

    return fwd, vjp


@primitive("sub", 2)
def _sub():
    def fwd(v, a):
        _check_broadcast("sub", v[0], v[1])
        return v[0] - v[1], None

    def vjp(g, v, out, cache, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)

    return fwd, vjp


@primitive("mul", 2)
def _mul():
    def fwd(v, a):
        _check_broadcast("mul", v[0], v[1])
        return v[0] * v[1], None

    def vjp(g, v, out, cache, a):
        return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)

    return fwd, vjp


# ---------------------------------------------------------------------------
# linear algebra


@primitive("matvec", 2)
def _matvec():
    def fwd(v, a):
        w, x = v
        if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"matvec: matrix {w.shape} cannot multiply vector {x.shape}")
        return x @ w.T, None

    def vjp(g, v, out, cache, a):
        w, x = v
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        return g2.T @ x2, g @ w

    return fwd, vjp


@primitive("linear", 3)
def _linear():
    """x @ W.T + b, fused."""

    def fwd(v, a):
        w, b, x = v
        if w.ndim != 2 or x.shape[-1:] != w.shape[1:] or b.shape != w.shape[:1]:
            raise ShapeError(f"linear: weight {w.shape}, bias {b.shape}, input {x.shape}")
        return x @ w.T + b, None

    def vjp(g, v, out, cache, a):
        w, b, x = v
        g2 = g.reshape(-1, g.shape[-1])
        return g2.T @ x.reshape(-1, x.shape[-1]), g2.sum(axis=0), g @ w

    return fwd, vjp


@primitive("bilinear", 3)
def _bilinear():
    """out_k = sum_ij W_kij a_i b_j."""

    def fwd(v, a):
        w, x, y = v
        if w.ndim != 3 or x.shape[-1] != w.shape[1] or y.shape[-1] != w.shape[2] or x.shape[:-1] != y.shape[:-1]:
            raise ShapeError(f"bilinear: weight {w.shape} with inputs {x.shape} and {y.shape}")
        # flatten to one matmul over the outer product; much faster than einsum
        lead = x.shape[:-1]
        k, i, j = w.shape
        outer = (x.reshape(-1, i, 1) * y.reshape(-1, 1, j)).reshape(-1, i * j)
        out = outer @ w.reshape(k, i * j).T
        return out.reshape(lead + (k,)), outer

    def vjp(g, v, out, outer, a):
        w, x, y = v
        k, i, j = w.shape
        g2 = g.reshape(-1, k)
        gw = (g2.T @ outer).reshape(w.shape)
        go = (g2 @ w.reshape(k, i * j)).reshape(-1, i, j)
        gx = np.einsum("nij,nj->ni", go, y.reshape(-1, j)).reshape(x.shape)
        gy = np.einsum("nij,ni->nj", go, x.reshape(-1, i)).reshape(y.shape)
        return gw, gx, gy

    return fwd, vjp


# ---------------------------------------------------------------------------
# structural


@primitive("concat")
def _concat():
    def fwd(v, a):
        lead = {x.shape[:-1] for x in v}
        if len(lead) != 1:
            raise ShapeError(f"concat: leading shapes differ: {[x.shape for x in v]}")
        sizes = [x.shape[-1] for x in v]
        return np.concatenate(v, axis=-1), np.cumsum(sizes)[:-1]

    def vjp(g, v, out, cache, a):
        return np.split(g, cache, axis=-1)

    return fwd, vjp


@primitive("slice", 1)
def _slice():
    def fwd(v, a):
        x = v[0]
        if x.ndim < 1:
            raise ShapeError(f"slice: cannot slice shape {x.shape}")
        return x[..., a["start"] : a["stop"]], None

    def vjp(g, v, out, cache, a):
        gx = np.zeros_like(v[0])
        gx[..., a["start"] : a["stop"]] = g
        return (gx,)

    return fwd, vjp


@primitive("stack")
def _stack():
    def fwd(v, a):
        shapes = {x.shape for x in v}
        if len(shapes) != 1:
            raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
        return np.stack(v, axis=0), None

    def vjp(g, v, out, cache, a):
        return list(g)

    return fwd, vjp


@primitive("index", 1)
def _index():
    def fwd(v, a):
        return v[0][a["i"]], None

    def vjp(g, v, out, cache, a):
        return (_Scatter(a["i"], g),)

    return fwd, vjp


# ---------------------------------------------------------------------------
# elementwise unary


def _unary(name, f, df):
    """df(x, y) gives dy/dx from the input and output values."""

    @primitive(name, 1)
    def _prim():
        def fwd(v, a):
            return f(v[0]), None

        def vjp(g, v, out, cache, a):
            return (g * df(v[0], out),)

        return fwd, vjp


_unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
_unary("sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))
_unary("softplus", _softplus, lambda x, y: _sigmoid(x))
_unary("exp", np.exp, lambda x, y: y)
_unary("log", np.log, lambda x, y: 1.0 / x)
_unary("square", np.square, lambda x, y: 2.0 * x)
_unary("abs", np.abs, lambda x, y: np.sign(x))


# ---------------------------------------------------------------------------
# reductions


@primitive("sum", 1)
def _sum():
    def fwd(v, a):
        return np.asarray(v[0].sum(axis=a.get("axis"))), None

    def vjp(g, v, out, cache, a):
        axis = a.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v[0].shape).copy(),)

    return fwd, vjp


@primitive("mean", 1)
def _mean():
    def fwd(v, a):
        return np.asarray(v[0].mean(axis=a.get("axis"))), None

    def vjp(g, v, out, cache, a):
        axis = a.get("axis")
        n = v[0].size if axis is None else v[0].shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, v[0].shape).copy(),)

    return fwd, vjp


# ---------------------------------------------------------------------------
# fused probabilistic primitives (summed over the last axis)


@primitive("gauss_logpdf", 3)
def _gauss_logpdf():
    def fwd(v, a):
        x, mu, sigma = v
        if not (x.shape == mu.shape == sigma.shape):
            raise ShapeError(f"gauss_logpdf: x {x.shape}, mean {mu.shape}, std {sigma.shape}")
        r = (x - mu) / sigma
        out = -0.5 * r * r - np.log(sigma) - 0.5 * LOG_2PI
        return out.sum(axis=-1), r

    def vjp(g, v, out, r, a):
        x, mu, sigma = v
        g = g[..., None]
        gx = -g * r / sigma
        gs = g * (r * r - 1.0) / sigma
        return gx, -gx, gs

    return fwd, vjp


@primitive("gauss_kl", 4)
def _gauss_kl():
    """KL(N(m1, s1) || N(m2, s2)) for diagonal Gaussians."""

    def fwd(v, a):
        m1, s1, m2, s2 = v
        if not (m1.shape == s1.shape == m2.shape == s2.shape):
            raise ShapeError(f"gauss_kl: shapes {m1.shape}, {s1.shape}, {m2.shape}, {s2.shape}")
        d = m1 - m2
        inv2 = 1.0 / (s2 * s2)
        kl = np.log(s2 / s1) + 0.5 * (s1 * s1 + d * d) * inv2 - 0.5
        return kl.sum(axis=-1), (d, inv2)

    def vjp(g, v, out, cache, a):
        m1, s1, m2, s2 = v
        d, inv2 = cache
        g = g[..., None]
        gm1 = g * d * inv2
        gs1 = g * (s1 * inv2 - 1.0 / s1)
        gs2 = g * (1.0 / s2 - (s1 * s1 + d * d) * inv2 / s2)
        return gm1, gs1, -gm1, gs2

    return fwd, vjp


# ---------------------------------------------------------------------------
# fused GRU cell


@primitive("gru_cell", 8)
def _gru_cell():
    """One GRU layer step.

    Inputs: x (..., n), h (..., H), Wz, Wr, Wn of shape (H, n+H), bz, br, bn (H,).
    z = sigmoid(Wz [x, h] + bz), r = sigmoid(Wr [x, h] + br),
    c = tanh(Wn [x, r*h] + bn), h' = (1 - z) * c + z * h.
    """

    def fwd(v, a):
        x, h, wz, wr, wn, bz, br, bn = v
        n, hs = x.shape[-1], h.shape[-1]
        for w in (wz, wr, wn):
            if w.shape != (hs, n + hs):
                raise ShapeError(f"gru_cell: weight {w.shape} does not fit input {x.shape} / hidden {h.shape}")
        if x.shape[:-1] != h.shape[:-1]:
            raise ShapeError(f"gru_cell: input {x.shape} and hidden {h.shape} batch shapes differ")
        xh = np.concatenate([x, h], axis=-1)
        z = _sigmoid(xh @ wz.T + bz)
        r = _sigmoid(xh @ wr.T + br)
        rh = r * h
        xrh = np.concatenate([x, rh], axis=-1)
        c = np.tanh(xrh @ wn.T + bn)
        out = (1.0 - z) * c + z * h
        return out, (xh, xrh, z, r, c)

    def vjp(g, v, out, cache, a):
        x, h, wz, wr, wn, bz, br, bn = v
        xh, xrh, z, r, c = cache
        n = x.shape[-1]
        flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
        dc = g * (1.0 - z)
        dz = g * (h - c)
        dh = g * z
        dpre_n = dc * (1.0 - c * c)
        dxrh = dpre_n @ wn
        dx = dxrh[..., :n]
        drh = dxrh[..., n:]
        dr = drh * h
        dh = dh + drh * r
        dpre_z = dz * z * (1.0 - z)
        dpre_r = dr * r * (1.0 - r)
        dxh = dpre_z @ wz + dpre_r @ wr
        dx = dx + dxh[..., :n]
        dh = dh + dxh[..., n:]
        gwz = flat(dpre_z).T @ flat(xh)
        gwr = flat(dpre_r).T @ flat(xh)
        gwn = flat(dpre_n).T @ flat(xrh)
        return (
            dx,
            dh,
            gwz,
            gwr,
            gwn,
            flat(dpre_z).sum(axis=0),
            flat(dpre_r).sum(axis=0),
            flat(dpre_n).sum(axis=0),
        )

    return fwd, vjp


@primitive("gru_layer", 8)
def _gru_layer():
    """A GRU layer run over a whole time-major sequence.

    Inputs: x (T, ..., n), h0 (..., H) and the gru_cell weights. Output is
    the hidden state at every step, (T, ..., H); numerically the same as
    chaining gru_cell. Input projections and weight gradients are computed
    with one matmul over all steps instead of one per step.
    """

    def fwd(v, a):
        x, h0, wz, wr, wn, bz, br, bn = v
        T, n, hs = x.shape[0], x.shape[-1], h0.shape[-1]
        for w in (wz, wr, wn):
            if w.shape != (hs, n + hs):
                raise ShapeError(f"gru_layer: weight {w.shape} does not fit input {x.shape} / hidden {h0.shape}")
        if x.shape[1:-1] != h0.shape[:-1]:
            raise ShapeError(f"gru_layer: input {x.shape} and hidden {h0.shape} batch shapes differ")
        xf = x.reshape(T, -1, n)
        h = h0.reshape(-1, hs)
        # contiguous per-gate arrays keep the step loop free of strided slices
        pz = xf @ wz[:, :n].T + bz
        pr = xf @ wr[:, :n].T + br
        pc = xf @ wn[:, :n].T + bn
        uz, ur, un = wz[:, n:].T.copy(), wr[:, n:].T.copy(), wn[:, n:].T.copy()
        hprev = np.empty((T,) + h.shape)
        Z, R, C = np.empty_like(hprev), np.empty_like(hprev), np.empty_like(hprev)
        for t in range(T):
            hprev[t] = h
            z = Z[t] = _sigmoid(pz[t] + h @ uz)
            r = R[t] = _sigmoid(pr[t] + h @ ur)
            c = C[t] = np.tanh(pc[t] + (r * h) @ un)
            h = c + z * (h - c)
        hs_all = np.concatenate([hprev[1:], h[None]], axis=0)
        return hs_all.reshape(x.shape[:-1] + (hs,)), (xf, hprev, Z, R, C)

    def vjp(g, v, out, cache, a):
        x, h0, wz, wr, wn, bz, br, bn = v
        xf, hprev, Z, R, C = cache
        T, n, hs = x.shape[0], x.shape[-1], h0.shape[-1]
        g = g.reshape(T, -1, hs)
        uz, ur, un = wz[:, n:], wr[:, n:], wn[:, n:]
        DZ, DR, DC = np.empty_like(Z), np.empty_like(R), np.empty_like(C)  # pre-activation grads
        dh = np.zeros_like(hprev[0])
        for t in range(T - 1, -1, -1):
            z, r, c, hp = Z[t], R[t], C[t], hprev[t]
            gh = g[t] + dh
            dpc = DC[t] = gh * (1.0 - z) * (1.0 - c * c)
            drh = dpc @ un
            dpz = DZ[t] = gh * (hp - c) * z * (1.0 - z)
            dpr = DR[t] = drh * hp * r * (1.0 - r)
            dh = gh * z + drh * r + dpz @ uz + dpr @ ur
        x2 = xf.reshape(-1, n)
        hp2 = hprev.reshape(-1, hs)
        rh2 = (R * hprev).reshape(-1, hs)
        dz2, dr2, dc2 = DZ.reshape(-1, hs), DR.reshape(-1, hs), DC.reshape(-1, hs)
        dx = (dz2 @ wz[:, :n] + dr2 @ wr[:, :n] + dc2 @ wn[:, :n]).reshape(x.shape)
        gwz = np.concatenate([dz2.T @ x2, dz2.T @ hp2], axis=1)
        gwr = np.concatenate([dr2.T @ x2, dr2.T @ hp2], axis=1)
        gwn = np.concatenate([dc2.T @ x2, dc2.T @ rh2], axis=1)
        return dx, dh.reshape(h0.shape), gwz, gwr, gwn, dz2.sum(axis=0), dr2.sum(axis=0), dc2.sum(axis=0)

    return fwd, vjp


# ---------------------------------------------------------------------------
# functional front end


def add(a, b):
    return forward("add", a, b)


def sub(a, b):
    return forward("sub", a, b)


def mul(a, b):
    return forward("mul", a, b)


def matvec(w, x):
    return forward("matvec", w, x)


def linear(w, b, x):
    return forward("linear", w, b, x)


def bilinear(w, x, y):
    return forward("bilinear", w, x, y)


def concat(xs):
    return forward("concat", *xs)


def slice_(x, start, stop):
    return forward("slice", x, start=start, stop=stop)


def stack(xs):
    return forward("stack", *xs)


def index(x, i):
    return forward("index", x, i=i)


def tanh(x):
    return forward("tanh", x)


def sigmoid(x):
    return forward("sigmoid", x)


def softplus(x):
    return forward("softplus", x)


def exp(x):
    return forward("exp", x)


def log(x):
    return forward("log", x)


def square(x):
    return forward("square", x)


def abs_(x):
    return forward("abs", x)


def sum_(x, axis=None):
    return forward("sum", x, axis=axis)


def mean(x, axis=None):
    return forward("mean", x, axis=axis)


def gauss_logpdf(x, mu, sigma):
    return forward("gauss_logpdf", x, mu, sigma)


def gauss_kl(m1, s1, m2, s2):
    return forward("gauss_kl", m1, s1, m2, s2)


def gru_cell(x, h, wz, wr, wn, bz, br, bn):
    return forward("gru_cell", x, h, wz, wr, wn, bz, br, bn)


def gru_layer(x, h0, wz, wr, wn, bz, br, bn):
    return forward("gru_layer", x, h0, wz, wr, wn, bz, br, bn)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    function: Callable[[Tape, Node], Node],
    point,
    step: float = 1e-5,
    kink_tol: float | None = None,
    coords=None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``function(tape, x)`` must build a scalar node from leaf ``x``. The error
    per coordinate is ``|analytic - central| / max(1, |analytic|)``.

    Raises :class:`ProbeError` if a probe evaluates to a non-finite value, or
    if the one-sided differences at a coordinate disagree by more than
    ``kink_tol`` (default ``max(1e-2, 1e3 * step)``), which marks a point
    where the function is not differentiable.

    ``coords`` restricts probing to the given flat indices (default: all).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=float)
    if kink_tol is None:
        kink_tol = max(1e-2, 1e3 * step)

    tape = Tape()
    x = tape.leaf(point)
    root = function(tape, x)
    f0 = float(root.value)
    if not math.isfinite(f0):
        raise ProbeError("function value is not finite at the base point")
    tape.backward(root)
    analytic = np.array(x.grad, dtype=float).ravel()

    def evaluate(p, coord):
        t = Tape()
        val = float(function(t, t.leaf(p)).value)
        if not math.isfinite(val):
            raise ProbeError(f"non-finite value while probing coordinate {coord}", coord)
        return val

    worst = 0.0
    flat = point.ravel()
    for i in range(flat.size) if coords is None else coords:
        i = int(i)
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = evaluate(plus.reshape(point.shape), i)
        fm = evaluate(minus.reshape(point.shape), i)
        central = (fp - fm) / (2.0 * step)
        fwd_d = (fp - f0) / step
        bwd_d = (f0 - fm) / step
        if abs(fwd_d - bwd_d) > kink_tol * max(1.0, abs(central)):
            raise ProbeError(
                f"coordinate {i}: one-sided slopes {bwd_d:.6g} and {fwd_d:.6g} disagree; "
                "function is not differentiable here",
                i,
            )
        err = abs(analytic[i] - central) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# verification suite: every primitive against central differences


def _primitive_cases(rng: np.random.Generator) -> dict:
    """kind -> (inputs, attrs) drawn at random inside each primitive's smooth domain."""
    u = lambda *s: rng.uniform(-1.5, 1.5, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    away = lambda *s: rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.2, 2.0, size=s)  # noqa: E731
    n, h = 2, 3
    gw = lambda: u(h, n + h) * 0.7  # noqa: E731
    return {
        "add": ([u(2, 3), u(3)], {}),
        "sub": ([u(2, 3), u(2, 3)], {}),
        "mul": ([u(2, 3), u(2, 1)], {}),
        "matvec": ([u(3, 4), u(2, 4)], {}),
        "linear": ([u(3, 4), u(3), u(2, 4)], {}),
        "bilinear": ([u(3, 2, 4), u(2, 2), u(2, 4)], {}),
        "concat": ([u(2, 2), u(2, 3), u(2, 1)], {}),
        "slice": ([u(2, 5)], {"start": 1, "stop": 4}),
        "stack": ([u(2, 3), u(2, 3)], {}),
        "index": ([u(4, 2, 3)], {"i": int(rng.integers(4))}),
        "tanh": ([u(2, 3)], {}),
        "sigmoid": ([u(2, 3) * 3], {}),
        "softplus": ([u(2, 3) * 3], {}),
        "exp": ([u(2, 3)], {}),
        "log": ([pos(2, 3)], {}),
        "square": ([u(2, 3)], {}),
        "abs": ([away(2, 3)], {}),
        "sum": ([u(2, 3)], {"axis": int(rng.integers(2))}),
        "mean": ([u(2, 3)], {"axis": None}),
        "gauss_logpdf": ([u(2, 3), u(2, 3), pos(2, 3)], {}),
        "gauss_kl": ([u(2, 3), pos(2, 3), u(2, 3), pos(2, 3)], {}),
        "gru_cell": ([u(2, n), u(2, h), gw(), gw(), gw(), u(h), u(h), u(h)], {}),
        "gru_layer": ([u(4, 2, n), u(2, h), gw(), gw(), gw(), u(h), u(h), u(h)], {}),
    }


def check_primitives(trials: int = 100, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst grad_check error per primitive over ``trials`` random draws.

    Each trial contracts the output with random weights to get a scalar and
    checks the gradient with respect to every input in turn.
    """
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in PRIMITIVES}
    for _ in range(trials):
        for kind, (inputs, attrs) in _primitive_cases(rng).items():
            out_shape = PRIMITIVES[kind].forward(inputs, attrs)[0].shape
            weights = rng.uniform(-1.0, 1.0, size=out_shape)
            for i in range(len(inputs)):

                def fn(tape, x, i=i, inputs=inputs, kind=kind, attrs=attrs):
                    args = [x if j == i else tape.const(v) for j, v in enumerate(inputs)]
                    return sum_(mul(tape.apply(kind, *args, **attrs), weights))

                worst[kind] = max(worst[kind], grad_check(fn, inputs[i], step))
    missing = set(PRIMITIVES) - set(_primitive_cases(rng))
    if missing:
        raise RuntimeError(f"no verification case for primitives {sorted(missing)}")
    return worst
