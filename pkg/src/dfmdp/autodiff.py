"""Minimal reverse-mode gradient engine over a fixed primitive set.

Everything downstream (MLP policies, soft policies, trajectory statistics,
the predictive model, the OPE metric) is expressed with these primitives:
affine map, ReLU, temperature-scaled softmax (plus a fused log-softmax),
log, exp, sum, elementwise product, square, division, sigmoid and clip.
Reshape exists as a structural helper with no arithmetic content.

All values are 64-bit float numpy arrays (scalars are 0-d arrays). A Tape
is an append-only list of primitive applications; it is recorded and walked
backward on a single thread.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(ValueError):
    """Shape or usage error raised while recording a tape."""


class _Node:
    __slots__ = ("op", "value", "parents", "aux")

    def __init__(self, op: str, value: np.ndarray, parents: tuple, aux):
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.issubdtype(a.dtype, np.floating):
        raise TapeError("tape values must be float arrays")
    return a


class Tape:
    """Append-only record of primitive applications.

    Node references are plain integer indices into ``nodes``. Leaves are
    created with :meth:`param` (named, differentiated) or :meth:`const`
    (opaque). Every method validates shapes at record time and names the
    offending primitive on mismatch.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._param_names: dict[str, int] = {}

    # -- leaves ----------------------------------------------------------

    def param(self, name: str, value) -> int:
        if name in self._param_names:
            raise TapeError(f"duplicate parameter name {name!r} on tape")
        ref = self._push("param", _as_array(value).copy(), (), name)
        self._param_names[name] = ref
        return ref

    def const(self, value) -> int:
        return self._push("const", _as_array(value), (), None)

    def value(self, ref: int) -> np.ndarray:
        return self.nodes[ref].value

    def param_ref(self, name: str) -> int:
        return self._param_names[name]

    # -- primitives ------------------------------------------------------

    def affine(self, x: int, w=None, b=None) -> int:
        """x @ w + b.  ``w`` may be None (identity map), so add(a, b) is
        affine(a, None, b).  ``w`` and ``b`` may be node refs or constants."""
        xv = self.value(x)
        wref, wv = self._ref_or_const(w)
        bref, bv = self._ref_or_const(b)
        if wv is None:
            out = xv
            if bv is not None and bv.ndim != 0 and xv.ndim == 0:
                raise TapeError("affine: cannot add array bias to scalar input")
        else:
            if wv.ndim == 0 or xv.shape[-1:] != wv.shape[:1]:
                raise TapeError(
                    f"affine: x {xv.shape} incompatible with w {wv.shape}")
            out = xv @ wv
        if bv is not None:
            if bv.ndim != 0 and bv.shape != out.shape and bv.shape != out.shape[-1:]:
                raise TapeError(
                    f"affine: bias {bv.shape} incompatible with output {out.shape}")
            out = out + bv
        return self._push("affine", _as_array(out), (x, wref, bref), None)

    def add(self, a: int, b) -> int:
        return self.affine(a, None, b)

    def relu(self, x: int) -> int:
        return self._push("relu", np.maximum(self.value(x), 0.0), (x,), None)

    def softmax(self, x: int, beta: float = 1.0) -> int:
        z = beta * self.value(x)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return self._push("softmax", p, (x,), float(beta))

    def log_softmax(self, x: int, beta: float = 1.0) -> int:
        z = beta * self.value(x)
        z = z - z.max(axis=-1, keepdims=True)
        ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return self._push("log_softmax", ls, (x,), float(beta))

    def sigmoid(self, x: int) -> int:
        v = self.value(x)
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return self._push("sigmoid", out, (x,), None)

    def log(self, x: int) -> int:
        return self._push("log", np.log(self.value(x)), (x,), None)

    def exp(self, x: int) -> int:
        return self._push("exp", np.exp(self.value(x)), (x,), None)

    def square(self, x: int) -> int:
        v = self.value(x)
        return self._push("square", v * v, (x,), None)

    def mul(self, a: int, b) -> int:
        bref, bv = self._ref_or_const(b)
        av = self.value(a)
        self._check_elementwise("mul", av, bv)
        return self._push("mul", av * bv, (a, bref), None)

    def div(self, a: int, b) -> int:
        bref, bv = self._ref_or_const(b)
        av = self.value(a)
        self._check_elementwise("div", av, bv)
        return self._push("div", av / bv, (a, bref), None)

    def reduce_sum(self, x: int, axis=None) -> int:
        v = self.value(x)
        return self._push("reduce_sum", _as_array(v.sum(axis=axis)), (x,), axis)

    def clip(self, x: int, lo: float, hi: float) -> int:
        v = self.value(x)
        return self._push("clip", np.clip(v, lo, hi), (x,), (float(lo), float(hi)))

    def reshape(self, x: int, shape) -> int:
        v = self.value(x)
        return self._push("reshape", v.reshape(shape), (x,), v.shape)

    # -- internals -------------------------------------------------------

    def _push(self, op: str, value: np.ndarray, parents: tuple, aux) -> int:
        if not np.all(np.isfinite(value)):
            # Tolerated: log(0) etc. surface downstream; record anyway so the
            # caller can inspect. Strictness lives with the consumers.
            pass
        self.nodes.append(_Node(op, value, parents, aux))
        return len(self.nodes) - 1

    def _ref_or_const(self, x):
        """Return (ref_or_None, value_or_None) accepting refs and raw arrays."""
        if x is None:
            return None, None
        if isinstance(x, (int, np.integer)):
            return int(x), self.value(int(x))
        return self.const(x), _as_array(x)

    def _check_elementwise(self, op: str, a: np.ndarray, b: np.ndarray):
        if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
            raise TapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def record_and_eval(program: Callable[[Tape], int],
                    inputs: dict[str, np.ndarray] | None = None):
    """Record ``program`` on a fresh tape and return (tape, out_ref, value).

    ``program`` receives the tape (with ``inputs`` pre-registered as params,
    reachable via ``tape.param_ref(name)``) and returns the output node ref.
    """
    tape = Tape()
    if inputs:
        for name, value in inputs.items():
            tape.param(name, value)
    out = program(tape)
    return tape, out, tape.value(out)


def backward_grad(tape: Tape, out: int, seed=None) -> dict[str, np.ndarray]:
    """Reverse pass from node ``out``; returns {param name: gradient}.

    ``out`` must be scalar unless an explicit cotangent ``seed`` of the
    output's shape is given.
    """
    out_val = tape.value(out)
    if seed is None:
        if out_val.ndim != 0:
            raise TapeError("backward_grad: output node is not scalar")
        seed = np.array(1.0)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_val.shape:
        raise TapeError("backward_grad: seed shape does not match output")

    adj: dict[int, np.ndarray] = {out: seed}
    nodes = tape.nodes
    for i in range(out, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        op = node.op
        if op in ("param", "const"):
            if op == "param":
                key = ("_param", node.aux)
                adj[key] = adj.get(key, 0.0) + g  # type: ignore[index]
            continue
        _OP_BACKWARD[op](tape, node, g, adj)

    grads = {}
    for name, ref in tape._param_names.items():
        g = adj.get(("_param", name))  # type: ignore[arg-type]
        grads[name] = (np.zeros_like(tape.value(ref)) if g is None
                       else np.asarray(g, dtype=np.float64))
    return grads


def _acc(adj, ref, g):
    if ref is None:
        return
    if ref in adj:
        adj[ref] = adj[ref] + g
    else:
        adj[ref] = g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (scalar or trailing-axes broadcast)."""
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    # trailing-dim bias case: (m, q) -> (q,)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _bw_affine(tape, node, g, adj):
    x, wref, bref = node.parents
    xv = tape.value(x)
    if wref is None:
        _acc(adj, x, _reduce_to(g, xv.shape))
    else:
        wv = tape.value(wref)
        if wv.ndim == 2:
            _acc(adj, x, g @ wv.T)
            _acc(adj, wref, np.outer(xv, g) if xv.ndim == 1 else xv.T @ g)
        else:  # w is a vector: out = x @ w is a contraction over the last axis
            if g.ndim == 0:
                _acc(adj, x, g * wv)
                _acc(adj, wref, g * xv)
            else:
                _acc(adj, x, np.outer(g, wv))
                _acc(adj, wref, xv.T @ g)
    if bref is not None:
        _acc(adj, bref, _reduce_to(g, tape.value(bref).shape))


def _bw_relu(tape, node, g, adj):
    x = node.parents[0]
    _acc(adj, x, g * (tape.value(x) > 0))


def _bw_softmax(tape, node, g, adj):
    p = node.value
    beta = node.aux
    inner = (g * p).sum(axis=-1, keepdims=True)
    _acc(adj, node.parents[0], beta * p * (g - inner))


def _bw_log_softmax(tape, node, g, adj):
    p = np.exp(node.value)
    beta = node.aux
    _acc(adj, node.parents[0],
         beta * (g - p * g.sum(axis=-1, keepdims=True)))


def _bw_sigmoid(tape, node, g, adj):
    v = node.value
    _acc(adj, node.parents[0], g * v * (1.0 - v))


def _bw_log(tape, node, g, adj):
    _acc(adj, node.parents[0], g / tape.value(node.parents[0]))


def _bw_exp(tape, node, g, adj):
    _acc(adj, node.parents[0], g * node.value)


def _bw_square(tape, node, g, adj):
    _acc(adj, node.parents[0], 2.0 * g * tape.value(node.parents[0]))


def _bw_mul(tape, node, g, adj):
    a, b = node.parents
    av, bv = tape.value(a), tape.value(b)
    _acc(adj, a, _reduce_to(g * bv, av.shape))
    _acc(adj, b, _reduce_to(g * av, bv.shape))


def _bw_div(tape, node, g, adj):
    a, b = node.parents
    av, bv = tape.value(a), tape.value(b)
    _acc(adj, a, _reduce_to(g / bv, av.shape))
    _acc(adj, b, _reduce_to(-g * av / (bv * bv), bv.shape))


def _bw_reduce_sum(tape, node, g, adj):
    x = node.parents[0]
    xv = tape.value(x)
    axis = node.aux
    if axis is None:
        _acc(adj, x, np.broadcast_to(g, xv.shape).copy())
    else:
        _acc(adj, x, np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy())


def _bw_clip(tape, node, g, adj):
    x = node.parents[0]
    lo, hi = node.aux
    xv = tape.value(x)
    # zero gradient outside (and exactly at) the clip boundary
    _acc(adj, x, g * ((xv > lo) & (xv < hi)))


def _bw_reshape(tape, node, g, adj):
    _acc(adj, node.parents[0], g.reshape(node.aux))


_OP_BACKWARD = {
    "affine": _bw_affine,
    "relu": _bw_relu,
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "sigmoid": _bw_sigmoid,
    "log": _bw_log,
    "exp": _bw_exp,
    "square": _bw_square,
    "mul": _bw_mul,
    "div": _bw_div,
    "reduce_sum": _bw_reduce_sum,
    "clip": _bw_clip,
    "reshape": _bw_reshape,
}


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if step <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"finite_diff_grad: non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


class ParamVector:
    """Named contiguous segments over one flat float64 vector.

    Flatten/unflatten is the identity; segment views share the flat buffer.
    """

    def __init__(self, segments: dict[str, np.ndarray]):
        self._names = list(segments)
        self._shapes = {}
        self._offsets = {}
        off = 0
        for name in self._names:
            a = np.asarray(segments[name], dtype=np.float64)
            self._shapes[name] = a.shape
            self._offsets[name] = off
            off += a.size
        self.flat = np.empty(off, dtype=np.float64)
        for name in self._names:
            a = np.asarray(segments[name], dtype=np.float64)
            o = self._offsets[name]
            self.flat[o:o + a.size] = a.ravel()

    @property
    def names(self) -> list[str]:
        return list(self._names)

    @property
    def size(self) -> int:
        return self.flat.size

    def get(self, name: str) -> np.ndarray:
        o = self._offsets[name]
        shape = self._shapes[name]
        return self.flat[o:o + int(np.prod(shape, dtype=int))].reshape(shape)

    def segments(self) -> dict[str, np.ndarray]:
        return {name: self.get(name).copy() for name in self._names}

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        if flat.shape != self.flat.shape:
            raise ValueError("with_flat: length mismatch")
        out = self.copy()
        out.flat[:] = flat
        return out

    def copy(self) -> "ParamVector":
        return ParamVector({name: self.get(name) for name in self._names})

    def grads_to_flat(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Pack a {segment: gradient array} map into this layout's flat order."""
        out = np.zeros_like(self.flat)
        for name in self._names:
            o = self._offsets[name]
            n = int(np.prod(self._shapes[name], dtype=int))
            g = grads.get(name)
            if g is not None:
                out[o:o + n] = np.asarray(g, dtype=np.float64).ravel()
        return out
