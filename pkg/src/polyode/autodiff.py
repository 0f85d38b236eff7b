"""Reverse-mode automatic differentiation on a flat tape of numpy operations.

A Tape records primitive operations in creation order (which is already a
topological order), each node holding its primal value and a closure mapping an
output cotangent to cotangents for its parents. One backward sweep over the
reversed node list therefore yields gradients for every leaf in a single pass,
with a fixed, deterministic accumulation order.

Newton iterations are never recorded on the tape; implicit steps enter as
single custom nodes whose backward applies the implicit function theorem (see
odeint). The matrix exponential likewise enters as one primitive whose backward
is the Frechet-adjoint identity from matexp.
"""

from dataclasses import dataclass

import numpy as np

from . import matexp


class NonFiniteGradient(Exception):
    """A gradient contained NaN or Inf."""


def _unbroadcast(g, shape):
    """Sum a cotangent down to the shape an operand had before broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@dataclass
class Node:
    value: np.ndarray
    parents: tuple = ()
    vjp: object = None  # cotangent -> tuple of parent cotangents


class Tape:
    def __init__(self):
        self.nodes = []

    def add(self, value, parents=(), vjp=None):
        self.nodes.append(Node(value=value, parents=parents, vjp=vjp))
        return len(self.nodes) - 1

    def backward(self, root_id, seed=None):
        """Accumulate cotangents from root back to every reachable node.

        Returns a list indexed by node id (None where no gradient flowed).
        """
        cot = [None] * len(self.nodes)
        root_value = self.nodes[root_id].value
        if seed is None:
            if root_value.size != 1:
                raise ValueError("backward from a non-scalar node requires an explicit seed")
            seed = np.ones_like(root_value)
        cot[root_id] = np.asarray(seed, dtype=float).reshape(root_value.shape)
        for nid in range(root_id, -1, -1):
            g = cot[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if cot[pid] is None:
                    cot[pid] = pg.copy()
                else:
                    cot[pid] += pg
        return cot


class Tensor:
    """Handle to a tape node; supports the handful of ops the solvers need."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return constant(self.tape, other)

    def __add__(self, other):
        other = self._lift(other)
        av, bv = self.value, other.value
        out = av + bv
        nid = self.tape.add(out, (self.id, other.id),
                            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))
        return Tensor(self.tape, nid, out)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        av, bv = self.value, other.value
        out = av - bv
        nid = self.tape.add(out, (self.id, other.id),
                            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))
        return Tensor(self.tape, nid, out)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __neg__(self):
        out = -self.value
        nid = self.tape.add(out, (self.id,), lambda g: (-g,))
        return Tensor(self.tape, nid, out)

    def __mul__(self, other):
        other = self._lift(other)
        av, bv = self.value, other.value
        out = av * bv
        nid = self.tape.add(out, (self.id, other.id),
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))
        return Tensor(self.tape, nid, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        av, bv = self.value, other.value
        out = av / bv
        nid = self.tape.add(out, (self.id, other.id),
                            lambda g: (_unbroadcast(g / bv, av.shape),
                                       _unbroadcast(-g * av / (bv * bv), bv.shape)))
        return Tensor(self.tape, nid, out)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __matmul__(self, other):
        other = self._lift(other)
        av, bv = self.value, other.value
        if av.ndim < 2 or bv.ndim < 2:
            raise ValueError("taped matmul requires operands with ndim >= 2")
        out = av @ bv

        def vjp(g):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return ga, gb

        nid = self.tape.add(out, (self.id, other.id), vjp)
        return Tensor(self.tape, nid, out)

    def __getitem__(self, idx):
        av = self.value
        out = av[idx]

        def vjp(g):
            full = np.zeros_like(av)
            full[idx] = g
            return (full,)

        nid = self.tape.add(out, (self.id,), vjp)
        return Tensor(self.tape, nid, out)

    def reshape(self, *shape):
        av = self.value
        out = av.reshape(*shape)
        nid = self.tape.add(out, (self.id,), lambda g: (g.reshape(av.shape),))
        return Tensor(self.tape, nid, out)

    def sum(self, axis=None, keepdims=False):
        av = self.value
        out = np.sum(av, axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, av.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, av.shape).copy(),)

        nid = self.tape.add(np.asarray(out, dtype=float), (self.id,), vjp)
        return Tensor(self.tape, nid, np.asarray(out, dtype=float))

    def transpose_last(self):
        av = self.value
        out = np.swapaxes(av, -1, -2)
        nid = self.tape.add(out, (self.id,), lambda g: (np.swapaxes(g, -1, -2),))
        return Tensor(self.tape, nid, out)


def constant(tape, x):
    """A node carrying data with no parents; gradients stop here."""
    x = np.asarray(x, dtype=float)
    return Tensor(tape, tape.add(x), x)


# Leaves are just constants whose ids the caller keeps (parameter slots).
leaf = constant


def stop_gradient(t):
    """Identity in the primal, zero in the backward pass."""
    out = t.value.copy()
    nid = t.tape.add(out, (t.id,), lambda g: (None,))
    return Tensor(t.tape, nid, out)


def expm_t(t):
    """Matrix exponential primitive, batched over leading axes of (..., d, d)."""
    av = t.value
    out, _ = matexp.expm_many(av)
    if av.ndim == 2:
        out = np.asarray(out)

    def vjp(g):
        return (matexp.expm_vjp(av, g),)

    nid = t.tape.add(out, (t.id,), vjp)
    return Tensor(t.tape, nid, out)


def custom(tape, value, parents, vjp):
    """Register an externally computed primitive (e.g. an implicit solve)."""
    value = np.asarray(value, dtype=float)
    return Tensor(tape, tape.add(value, tuple(p.id for p in parents), vjp), value)


def grad(loss_fn, at):
    """Evaluate loss_fn on a fresh tape at parameters `at`; return (value, gradient).

    loss_fn receives a Tensor leaf and must return a scalar Tensor. The gradient is
    checked for NaN/Inf.
    """
    at = np.asarray(at, dtype=float)
    tape = Tape()
    theta = leaf(tape, at)
    out = loss_fn(theta)
    if not isinstance(out, Tensor) or out.value.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    cot = tape.backward(out.id)
    g = cot[theta.id]
    if g is None:
        g = np.zeros_like(at)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    return float(out.value.reshape(())), g


def jacobian_wrt_state(net, y, params):
    """d net/d y at a single state, via one forward and m_out reverse sweeps.

    Exact (to rounding) for polynomial networks; used as the reference path for
    the batched forward-sensitivity Jacobian the integrators use.
    """
    y = np.asarray(y, dtype=float)
    tape = Tape()
    theta = leaf(tape, np.asarray(params, dtype=float))
    yt = leaf(tape, y.reshape(1, -1))
    out = net.forward_t(theta, yt)  # (1, m_out)
    m_out = out.value.shape[1]
    rows = []
    for i in range(m_out):
        seed = np.zeros_like(out.value)
        seed[0, i] = 1.0
        cot = tape.backward(out.id, seed)
        gy = cot[yt.id]
        rows.append(np.zeros(y.size) if gy is None else gy[0])
    jac = np.stack(rows, axis=0)
    if not np.all(np.isfinite(jac)):
        raise NonFiniteGradient("state Jacobian contains NaN or Inf")
    return jac


@dataclass(frozen=True)
class ParamLayout:
    """Names, offsets and shapes of the slices packed into a flat parameter vector."""

    entries: tuple  # of (name, offset, shape)
    size: int

    @staticmethod
    def build(shapes):
        """shapes: iterable of (name, shape) in packing order."""
        entries = []
        offset = 0
        for name, shape in shapes:
            count = int(np.prod(shape, dtype=int)) if shape else 1
            entries.append((name, offset, tuple(shape)))
            offset += count
        return ParamLayout(entries=tuple(entries), size=offset)

    def slice_of(self, name):
        for n, offset, shape in self.entries:
            if n == name:
                count = int(np.prod(shape, dtype=int)) if shape else 1
                return offset, offset + count, shape
        raise KeyError(name)

    def unflatten(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.size,):
            raise ValueError(f"expected flat vector of size {self.size}, got {params.shape}")
        out = {}
        for name, offset, shape in self.entries:
            count = int(np.prod(shape, dtype=int)) if shape else 1
            out[name] = params[offset:offset + count].reshape(shape)
        return out

    def flatten(self, arrays):
        parts = []
        for name, _offset, shape in self.entries:
            a = np.asarray(arrays[name], dtype=float)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            parts.append(a.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def slices_t(self, theta):
        """Split a flat parameter Tensor into named, shaped Tensors."""
        out = {}
        for name, offset, shape in self.entries:
            count = int(np.prod(shape, dtype=int)) if shape else 1
            out[name] = theta[offset:offset + count].reshape(shape)
        return out
