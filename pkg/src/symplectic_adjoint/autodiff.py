"""A small reverse-mode tape and the dynamics-function contract built on it.

The tape records vector operations (add, constant scaling, matrix-vector
products, tanh, concatenation, slicing) and opaque dynamics evaluations whose
reverse rule is a user-supplied vector-Jacobian product. Each node keeps only
the values its reverse rule needs; the total is reported as
``live_scalar_count`` and mirrored into an optional :class:`MemoryMeter`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .accounting import MemoryMeter

__all__ = [
    "AnalyticDynamics",
    "DynamicsFunction",
    "MlpDynamics",
    "ShapeError",
    "Tape",
    "TapeConsumed",
    "UnknownProblem",
    "Var",
    "analytic_dynamics",
    "jacobian_x",
    "load_parameters",
    "save_parameters",
    "tape_eval",
    "tape_vjp",
    "vjp_on_tape",
]


class ShapeError(ValueError):
    pass


class TapeConsumed(RuntimeError):
    """A tape was used after its single reverse sweep (or after being discarded)."""


class UnknownProblem(KeyError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    saved: tuple = ()
    meta: object = None
    size: int = 0


class Var:
    """A value recorded on a tape. Supports ``+``, ``-`` and scaling by constants."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape._push("add", (self.index, other.index), self.value + other.value)
        return self.tape._push("add", (self.index,), self.value + other)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __neg__(self):
        return (-1.0) * self

    def __mul__(self, c):
        if isinstance(c, Var):
            raise TypeError("Var * Var is not supported; use an opaque dynamics node")
        c = float(c)
        return self.tape._push("scale", (self.index,), c * self.value, meta=c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


class Tape:
    """Append-only record of operations supporting exactly one reverse sweep."""

    def __init__(self, meter: MemoryMeter | None = None):
        self.nodes: list[_Node] = []
        self.live_scalar_count = 0
        self.meter = meter
        self.consumed = False
        self.output: Var | None = None
        self.wrt: tuple[Var, ...] = ()

    # recording -----------------------------------------------------------

    def _push(self, kind, inputs, value, saved=(), meta=None) -> Var:
        if self.consumed:
            raise TapeConsumed("cannot record on a consumed tape")
        size = int(sum(np.size(v) for v in saved))
        self.nodes.append(_Node(kind, tuple(inputs), tuple(saved), meta, size))
        self._grow(size)
        return Var(self, len(self.nodes) - 1, value)

    def _grow(self, n: int) -> None:
        self.live_scalar_count += n
        if self.meter is not None and n:
            self.meter.retain(n)

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=float)
        return self._push("leaf", (), value)

    def matvec(self, W: Var, x: Var) -> Var:
        return self._push("matvec", (W.index, x.index), W.value @ x.value, saved=(W.value, x.value))

    def tanh(self, x: Var) -> Var:
        y = np.tanh(x.value)
        return self._push("tanh", (x.index,), y, saved=(y,))

    def concat(self, *parts: Var) -> Var:
        sizes = tuple(p.value.size for p in parts)
        value = np.concatenate([p.value for p in parts])
        return self._push("concat", tuple(p.index for p in parts), value, meta=sizes)

    def slice(self, x: Var, start: int, stop: int, shape: tuple[int, ...]) -> Var:
        value = x.value[start:stop].reshape(shape)
        return self._push("slice", (x.index,), value, meta=(start, stop, x.value.size))

    def opaque(self, f: "DynamicsFunction", x: Var, t: float, theta: Var) -> Var:
        """Record ``f(x, t, theta)`` as one node whose reverse rule is ``f.vjp``."""
        value = f.eval(x.value, t, theta.value)
        return self._push("opaque", (x.index, theta.index), value, saved=(x.value.copy(),), meta=(f, t, theta.value))

    def mark(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        """Drop every node recorded after ``mark`` (used for rejected steps)."""
        dropped = sum(n.size for n in self.nodes[mark:])
        del self.nodes[mark:]
        self.live_scalar_count -= dropped
        if self.meter is not None and dropped:
            self.meter.release(dropped)

    # reverse sweep -------------------------------------------------------

    def backward(self, output: Var, seed, wrt) -> list[np.ndarray]:
        """Reverse sweep from ``output`` seeded with ``seed``; consumes the tape.

        Returns the adjoints of the ``wrt`` variables (zeros where untouched).
        """
        if self.consumed:
            raise TapeConsumed("tape already swept or discarded")
        adj: list = [None] * len(self.nodes)
        adj[output.index] = np.array(seed, dtype=float).reshape(output.value.shape)
        for k in range(output.index, -1, -1):
            g = adj[k]
            if g is None:
                continue
            node = self.nodes[k]
            kind = node.kind
            if kind == "leaf":
                continue
            if kind == "add":
                for i in node.inputs:
                    _acc(adj, i, g)
            elif kind == "scale":
                _acc(adj, node.inputs[0], node.meta * g)
            elif kind == "matvec":
                W, x = node.saved
                _acc(adj, node.inputs[0], np.outer(g, x))
                _acc(adj, node.inputs[1], W.T @ g)
            elif kind == "tanh":
                (y,) = node.saved
                _acc(adj, node.inputs[0], g * (1.0 - y * y))
            elif kind == "concat":
                offset = 0
                for i, n in zip(node.inputs, node.meta):
                    _acc(adj, i, g[offset:offset + n])
                    offset += n
            elif kind == "slice":
                start, stop, total = node.meta
                full = np.zeros(total)
                full[start:stop] = g.ravel()
                _acc(adj, node.inputs[0], full)
            elif kind == "opaque":
                f, t, theta = node.meta
                (x,) = node.saved
                gx, gth = f.vjp(x, t, theta, g)
                _acc(adj, node.inputs[0], gx)
                _acc(adj, node.inputs[1], gth)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown node kind {kind}")
        grads = [adj[v.index] if adj[v.index] is not None else np.zeros_like(v.value) for v in wrt]
        self.discard()
        return grads

    def discard(self) -> None:
        if self.consumed:
            return
        if self.meter is not None and self.live_scalar_count:
            self.meter.release(self.live_scalar_count)
        self.live_scalar_count = 0
        self.nodes = []
        self.consumed = True


def _acc(adj, i, g):
    if adj[i] is None:
        adj[i] = g
    else:
        adj[i] = adj[i] + g


class DynamicsFunction:
    """Right-hand side ``f(x, t, theta)`` with vector-Jacobian products.

    Subclasses implement ``eval`` and ``vjp``; ``record`` places one evaluation
    on a tape. The default ``record`` is a single opaque node, which is what
    closed-form dynamics want. Network dynamics override it to expose their
    layer-by-layer graph so tape memory reflects the network size.
    """

    d: int
    m: int
    name: str = "dynamics"

    def eval(self, x, t, theta) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x, t, theta, lam) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def record(self, tape: Tape, x: Var, t: float, theta: Var) -> Var:
        return tape.opaque(self, x, t, theta)

    def check_shapes(self, x, theta) -> None:
        if np.shape(x) != (self.d,):
            raise ShapeError(f"{self.name}: state has shape {np.shape(x)}, expected ({self.d},)")
        if np.shape(theta) != (self.m,):
            raise ShapeError(f"{self.name}: parameters have shape {np.shape(theta)}, expected ({self.m},)")


def vjp_on_tape(f: DynamicsFunction, x, t, theta, lam, meter: MemoryMeter | None = None):
    """Record one evaluation of ``f`` on a fresh tape and sweep it once.

    Returns ``(f(x), gx, gtheta, tape_scalars)``.
    """
    tape = Tape(meter)
    xv = tape.leaf(x)
    tv = tape.leaf(theta)
    out = f.record(tape, xv, t, tv)
    size = tape.live_scalar_count
    gx, gth = tape.backward(out, lam, (xv, tv))
    return out.value, gx, gth, size


def jacobian_x(f: DynamicsFunction, x, t, theta) -> np.ndarray:
    """Dense ``df/dx`` assembled row by row from VJPs."""
    rows = [f.vjp(x, t, theta, e)[0] for e in np.eye(f.d)]
    return np.array(rows)


class MlpDynamics(DynamicsFunction):
    """``f(x, t) = W_L tanh(... tanh(W_1 [x; t] + b_1) ...) + b_L``.

    ``widths`` lists the state dimension, the hidden widths and the output
    dimension; the first layer sees one extra input for time. Parameters are
    flattened layer by layer, each as its weight matrix (row-major) followed by
    its bias.
    """

    name = "mlp"

    def __init__(self, widths):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[0] != widths[-1]:
            raise ShapeError(f"widths must start and end with the state dimension, got {widths}")
        self.widths = widths
        self.d = widths[0]
        self.layers = []
        offset = 0
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if k == 0:
                n_in += 1
            w = (offset, offset + n_in * n_out, (n_out, n_in))
            offset += n_in * n_out
            bias = (offset, offset + n_out, (n_out,))
            offset += n_out
            self.layers.append((w, bias))
        self.m = offset

    def init_params(self, seed: int = 0, scale: float = 1.0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.empty(self.m)
        for (ws, we, shape), (bs, be, _) in self.layers:
            theta[ws:we] = rng.normal(0.0, scale / np.sqrt(shape[1]), size=we - ws)
            theta[bs:be] = rng.normal(0.0, 0.1 * scale, size=be - bs)
        return theta

    def eval(self, x, t, theta):
        self.check_shapes(x, theta)
        h = np.concatenate([np.asarray(x, dtype=float), np.array([float(t)])])
        last = len(self.layers) - 1
        for k, ((ws, we, shape), (bs, be, bshape)) in enumerate(self.layers):
            h = theta[ws:we].reshape(shape) @ h + theta[bs:be].reshape(bshape)
            if k < last:
                h = np.tanh(h)
        return h

    def record(self, tape, x, t, theta):
        if x.value.shape != (self.d,) or theta.value.shape != (self.m,):
            raise ShapeError("dimension mismatch between MLP and its inputs")
        h = tape.concat(x, tape.leaf([float(t)]))
        last = len(self.layers) - 1
        for k, ((ws, we, shape), (bs, be, bshape)) in enumerate(self.layers):
            W = tape.slice(theta, ws, we, shape)
            b = tape.slice(theta, bs, be, bshape)
            h = tape.matvec(W, h) + b
            if k < last:
                h = tape.tanh(h)
        return h

    def vjp(self, x, t, theta, lam):
        _, gx, gth, _ = vjp_on_tape(self, x, t, theta, lam)
        return gx, gth


def tape_eval(f: DynamicsFunction, x, t, theta, meter: MemoryMeter | None = None):
    """Evaluate ``f`` while recording; returns ``(dxdt, tape)`` ready for :func:`tape_vjp`."""
    f.check_shapes(np.asarray(x), np.asarray(theta))
    tape = Tape(meter)
    xv = tape.leaf(x)
    tv = tape.leaf(theta)
    out = f.record(tape, xv, t, tv)
    tape.output = out
    tape.wrt = (xv, tv)
    return out.value, tape


def tape_vjp(tape: Tape, lam) -> tuple[np.ndarray, np.ndarray]:
    """``(lam^T df/dx, lam^T df/dtheta)`` from a tape made by :func:`tape_eval`."""
    if tape.consumed or tape.output is None:
        raise TapeConsumed("tape already consumed")
    lam = np.asarray(lam, dtype=float)
    if lam.shape != tape.output.value.shape:
        raise ShapeError(f"cotangent shape {lam.shape} does not match output {tape.output.value.shape}")
    gx, gth = tape.backward(tape.output, lam, tape.wrt)
    return gx, gth


class AnalyticDynamics(DynamicsFunction):
    """Closed-form dynamics with hand-written Jacobians (exactness oracles)."""

    def __init__(self, name, d, m, fn, vjp_fn):
        self.name = name
        self.d = d
        self.m = m
        self._fn = fn
        self._vjp = vjp_fn

    def eval(self, x, t, theta):
        return self._fn(np.asarray(x, dtype=float), t, np.asarray(theta, dtype=float))

    def vjp(self, x, t, theta, lam):
        gx, gth = self._vjp(np.asarray(x, dtype=float), t, np.asarray(theta, dtype=float),
                            np.asarray(lam, dtype=float))
        return np.asarray(gx, dtype=float), np.asarray(gth, dtype=float)


def _linear(d: int) -> AnalyticDynamics:
    # theta = vec(A), row-major
    def fn(x, t, th):
        return th.reshape(d, d) @ x

    def vjp(x, t, th, lam):
        return th.reshape(d, d).T @ lam, np.outer(lam, x).ravel()

    return AnalyticDynamics("linear", d, d * d, fn, vjp)


def _decay(d: int = 1) -> AnalyticDynamics:
    def fn(x, t, th):
        return th[0] * x

    def vjp(x, t, th, lam):
        return th[0] * lam, np.array([lam @ x])

    return AnalyticDynamics("decay", d, 1, fn, vjp)


_J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _rotation() -> AnalyticDynamics:
    # f = omega * J x, theta = [omega]
    def fn(x, t, th):
        return th[0] * (_J @ x)

    def vjp(x, t, th, lam):
        return th[0] * (_J.T @ lam), np.array([lam @ (_J @ x)])

    return AnalyticDynamics("rotation", 2, 1, fn, vjp)


def _gradient_flow(G) -> AnalyticDynamics:
    """``f = G grad H`` with ``H(x) = sum(theta_0 x^2 / 2 - theta_1 x^3 / 6)``."""
    G = np.array(G, dtype=float)
    d = G.shape[0]

    def fn(x, t, th):
        return G @ (th[0] * x - 0.5 * th[1] * x * x)

    def vjp(x, t, th, lam):
        u = G.T @ lam
        hess = th[0] - th[1] * x
        return hess * u, np.array([u @ x, -0.5 * (u @ (x * x))])

    return AnalyticDynamics("gradient_flow", d, 2, fn, vjp)


def analytic_dynamics(kind: str, params: dict | None = None) -> DynamicsFunction:
    """Closed-form benchmark dynamics.

    ``linear`` takes ``d`` (parameters are the row-major entries of ``A``),
    ``decay`` takes ``d`` (one rate parameter), ``rotation`` has one angular
    rate parameter, ``gradient_flow`` takes the coupling matrix ``G`` and has the
    two energy coefficients as parameters.
    """
    params = dict(params or {})
    if kind == "linear":
        return _linear(int(params.get("d", 2)))
    if kind == "decay":
        return _decay(int(params.get("d", 1)))
    if kind == "rotation":
        return _rotation()
    if kind == "gradient_flow":
        return _gradient_flow(params["G"])
    raise UnknownProblem(kind)


# parameter persistence -------------------------------------------------------

_MAGIC = b"SADJ"
_VERSION = 1


def save_parameters(fp: BinaryIO, theta, d: int, widths=()) -> None:
    """Write ``theta`` as little-endian float64 after a header ``(d, m, widths)``."""
    theta = np.asarray(theta, dtype="<f8").ravel()
    widths = [int(w) for w in widths]
    fp.write(_MAGIC)
    fp.write(struct.pack("<IIII", _VERSION, int(d), theta.size, len(widths)))
    fp.write(struct.pack(f"<{len(widths)}I", *widths))
    fp.write(theta.tobytes())


@dataclass
class StoredParameters:
    d: int
    theta: np.ndarray
    widths: list[int] = field(default_factory=list)


def load_parameters(fp: BinaryIO) -> StoredParameters:
    if fp.read(4) != _MAGIC:
        raise ValueError("not a parameter file")
    version, d, m, nw = struct.unpack("<IIII", fp.read(16))
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    widths = list(struct.unpack(f"<{nw}I", fp.read(4 * nw)))
    raw = fp.read(8 * m)
    if len(raw) != 8 * m:
        raise ValueError("truncated parameter file")
    return StoredParameters(d=d, theta=np.frombuffer(raw, dtype="<f8").astype(float), widths=widths)
