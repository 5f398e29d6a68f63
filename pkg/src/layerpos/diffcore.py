"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive as it is evaluated (forward values
are computed eagerly) and replays the records backwards to accumulate
adjoints.  Tapes are rebuilt for every forward pass and never reused.

Tensors are plain C-contiguous ``numpy.float64`` arrays.  Scalars are
0-d arrays.  Elementwise primitives require identical shapes; the only
broadcasting primitives are ``add_bias``, ``broadcast_scalar`` and
``shift``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeMismatch(ValueError):
    """Operand shapes violate a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """A primitive or probe produced NaN or infinity."""


class NotScalarError(ValueError):
    """``backward`` was asked to differentiate a non-scalar node."""


def as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "index", "op", "inputs", "value", "payload",
                 "trainable", "requires_grad", "ctx")

    def __init__(self, tape, index, op, inputs, value, payload, trainable, requires_grad, ctx):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.value = value
        self.payload = payload
        self.trainable = trainable
        self.requires_grad = requires_grad
        self.ctx = ctx

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.index}, {self.op}, shape={self.value.shape})"


@dataclass(frozen=True)
class Primitive:
    """Forward rule, shape check and vector-Jacobian product for one op.

    ``forward(values, payload) -> (out, ctx)`` and
    ``vjp(g, values, out, ctx, payload, needs) -> list of input adjoints``
    (``None`` where ``needs`` is false).
    """

    name: str
    arity: int
    check: Callable
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, check, forward, vjp):
    PRIMITIVES[name] = Primitive(name, arity, check, forward, vjp)


def _same_shape(vals, payload):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise operands differ: {a.shape} vs {b.shape}")


def _any(vals, payload):
    pass


def _matrix(vals, payload):
    if vals[0].ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {vals[0].shape}")


def _matmul_check(vals, payload):
    a, b = vals
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ShapeMismatch(f"matmul needs a matrix operand: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")


def _matmul_vjp(g, vals, out, ctx, payload, needs):
    a, b = vals
    ga = gb = None
    if needs[0]:
        ga = g @ b.T if b.ndim == 2 else np.outer(g, b)
    if needs[1]:
        if a.ndim == 2:
            gb = a.T @ g
        else:
            gb = np.outer(a, g)
    return [ga, gb]


_register("matmul", 2, _matmul_check, lambda v, p: (v[0] @ v[1], None), _matmul_vjp)
_register("add", 2, _same_shape, lambda v, p: (v[0] + v[1], None),
          lambda g, v, o, c, p, n: [g if n[0] else None, g if n[1] else None])
_register("sub", 2, _same_shape, lambda v, p: (v[0] - v[1], None),
          lambda g, v, o, c, p, n: [g if n[0] else None, -g if n[1] else None])
_register("mul", 2, _same_shape, lambda v, p: (v[0] * v[1], None),
          lambda g, v, o, c, p, n: [g * v[1] if n[0] else None, g * v[0] if n[1] else None])
_register("scale", 1, _any, lambda v, p: (v[0] * p, None),
          lambda g, v, o, c, p, n: [g * p])
_register("shift", 1, _any, lambda v, p: (v[0] + p, None),
          lambda g, v, o, c, p, n: [g])
_register("relu", 1, _any, lambda v, p: (np.maximum(v[0], 0.0), None),
          lambda g, v, o, c, p, n: [g * (v[0] > 0.0)])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Numerically stable logistic function on arrays or floats."""
    arr = np.asarray(x, dtype=np.float64)
    res = _sigmoid(arr.reshape(-1)).reshape(arr.shape)
    return res if res.ndim else float(res)


_register("sigmoid", 1, _any,
          lambda v, p: (_sigmoid(v[0].reshape(-1)).reshape(v[0].shape), None),
          lambda g, v, o, c, p, n: [g * o * (1.0 - o)])


def _l2norm_fwd(v, p):
    return np.array(np.sqrt(np.sum(v[0] * v[0]))), None


_register("l2norm", 1, _any, _l2norm_fwd, lambda g, v, o, c, p, n: [g * v[0] / o])


def _dot_check(vals, payload):
    a, b = vals
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot needs equal-length vectors: {a.shape} vs {b.shape}")


_register("dot", 2, _dot_check, lambda v, p: (np.array(v[0] @ v[1]), None),
          lambda g, v, o, c, p, n: [g * v[1] if n[0] else None, g * v[0] if n[1] else None])
_register("mean", 1, _any, lambda v, p: (np.array(np.mean(v[0])), None),
          lambda g, v, o, c, p, n: [np.full(v[0].shape, g / v[0].size)])
_register("sum", 1, _any, lambda v, p: (np.array(np.sum(v[0])), None),
          lambda g, v, o, c, p, n: [np.full(v[0].shape, float(g))])


def _bias_check(vals, payload):
    a, b = vals
    if b.ndim != 1 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"bias {b.shape} does not match {a.shape}")


def _bias_vjp(g, v, o, c, p, n):
    gb = None
    if n[1]:
        gb = g.sum(axis=0) if g.ndim == 2 else g
    return [g if n[0] else None, gb]


_register("add_bias", 2, _bias_check, lambda v, p: (v[0] + v[1], None), _bias_vjp)
_register("transpose", 1, _matrix, lambda v, p: (np.ascontiguousarray(v[0].T), None),
          lambda g, v, o, c, p, n: [g.T])


def _scalar_check(vals, payload):
    if vals[0].shape != ():
        raise ShapeMismatch(f"expected a scalar, got shape {vals[0].shape}")


_register("broadcast_scalar", 1, _scalar_check,
          lambda v, p: (np.full(p, float(v[0])), None),
          lambda g, v, o, c, p, n: [np.array(np.sum(g))])


def _reshape_check(vals, payload):
    if int(np.prod(payload, dtype=np.int64)) != vals[0].size:
        raise ShapeMismatch(f"cannot reshape {vals[0].shape} to {payload}")


_register("reshape", 1, _reshape_check,
          lambda v, p: (v[0].reshape(p).copy(), None),
          lambda g, v, o, c, p, n: [np.reshape(g, v[0].shape)])


def _take_rows_check(vals, payload):
    if vals[0].ndim < 1:
        raise ShapeMismatch("take_rows needs at least one axis")


_register("take_rows", 1, _take_rows_check,
          lambda v, p: (np.ascontiguousarray(v[0][p]), None),
          lambda g, v, o, c, p, n: [_scatter_rows(g, p, v[0].shape)])


def _scatter_rows(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


def _rownorm_fwd(v, p):
    return np.sqrt(np.einsum("ij,ij->i", v[0], v[0])), None


_register("rownorm", 1, _matrix, _rownorm_fwd,
          lambda g, v, o, c, p, n: [v[0] * (g / o)[:, None]])


def _normalize_fwd(v, p):
    U, norms = _kernels.normalize_rows_forward(v[0])
    return U, norms


_register("normalize_rows", 1, _matrix, _normalize_fwd,
          lambda g, v, o, c, p, n: [_kernels.normalize_rows_backward(np.ascontiguousarray(g), o, c)])


def _cos_check(vals, payload):
    D, t = vals
    if D.ndim != 2 or t.ndim != 1 or D.shape[1] != t.shape[0]:
        raise ShapeMismatch(f"cosine_rows needs [n x e] and [e]: {D.shape}, {t.shape}")


def _cos_fwd(v, p):
    cos, norms = _kernels.cosine_rows_forward(v[0], v[1])
    return cos, norms


def _cos_vjp(g, v, o, norms, p, n):
    D, t = v
    g = np.ascontiguousarray(g)
    gD = _kernels.cosine_rows_backward(g, D, t, o, norms) if n[0] else None
    gt = None
    if n[1]:
        tnorm = np.sqrt(t @ t)
        th = t / tnorm
        gt = ((g / norms) @ D - (g * o).sum() * th) / tnorm
    return [gD, gt]


_register("cosine_rows", 2, _cos_check, _cos_fwd, _cos_vjp)


def _lora_check(vals, payload):
    H, W0, b, A, B, s = vals
    din = H.shape[-1]
    if H.ndim not in (1, 2) or W0.ndim != 2 or W0.shape[1] != din:
        raise ShapeMismatch(f"input {H.shape} does not match weight {W0.shape}")
    dout = W0.shape[0]
    if b.shape != (dout,):
        raise ShapeMismatch(f"bias {b.shape} does not match weight {W0.shape}")
    if A.ndim != 2 or A.shape[1] != din or B.shape != (dout, A.shape[0]):
        raise ShapeMismatch(f"factors {A.shape}, {B.shape} do not match weight {W0.shape}")
    if s.shape != ():
        raise ShapeMismatch("gate scale must be a scalar")


def _lora_fwd(v, p):
    H, W0, b, A, B, s = v
    vec = H.ndim == 1
    H2 = H.reshape(1, -1) if vec else H
    Z, HA = _kernels.lora_forward(H2, W0, b, A, B, float(s))
    return (Z[0] if vec else Z), (H2, HA)


def _lora_vjp(g, v, o, ctx, p, n):
    H, W0, b, A, B, s = v
    H2, HA = ctx
    vec = H.ndim == 1
    dZ = np.ascontiguousarray(g.reshape(1, -1) if vec else g)
    need_w = n[1] or n[2]
    dH, dA, dB, ds, dW0, db = _kernels.lora_backward(dZ, H2, HA, W0, A, B, float(s), n[0], need_w,
                                                    n[3] or n[4] or n[5])
    if dH is not None and vec:
        dH = dH[0]
    return [dH, dW0 if n[1] else None, db if n[2] else None,
            dA if n[3] else None, dB if n[4] else None, np.array(ds) if n[5] else None]


_register("lora_linear", 6, _lora_check, _lora_fwd, _lora_vjp)


class Tape:
    """Append-only record of evaluated primitives."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, trainable: bool = False) -> Node:
        node = Node(self, len(self.nodes), "leaf", (), as_tensor(value), None,
                    bool(trainable), bool(trainable), None)
        self.nodes.append(node)
        return node

    def record_op(self, op: str, inputs: Sequence[Node], payload=None) -> Node:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise ValueError(f"unknown primitive {op!r}")
        if len(inputs) != prim.arity:
            raise ValueError(f"{op} takes {prim.arity} inputs, got {len(inputs)}")
        for node in inputs:
            if node.tape is not self:
                raise ValueError("input node belongs to another tape")
        vals = [node.value for node in inputs]
        prim.check(vals, payload)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out, ctx = prim.forward(vals, payload)
        out = np.asarray(out, dtype=np.float64, order="C")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        node = Node(self, len(self.nodes), op, tuple(inputs), out, payload, False,
                    any(i.requires_grad for i in inputs), ctx)
        self.nodes.append(node)
        return node

    def backward(self, output: Node) -> dict[Node, np.ndarray]:
        """Gradients of a scalar node with respect to every trainable leaf."""
        if output.tape is not self:
            raise ValueError("output node belongs to another tape")
        if output.value.shape != ():
            raise NotScalarError(f"backward needs a scalar output, got {output.value.shape}")
        grads: dict[int, np.ndarray] = {output.index: np.array(1.0)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None) if node.op != "leaf" else None
            if g is None or not node.requires_grad:
                continue
            prim = PRIMITIVES[node.op]
            needs = [i.requires_grad for i in node.inputs]
            parts = prim.vjp(g, [i.value for i in node.inputs], node.value, node.ctx,
                             node.payload, needs)
            for inp, part in zip(node.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + part
                else:
                    grads[inp.index] = part
        result = {}
        for node in self.nodes:
            if node.op == "leaf" and node.trainable:
                g = grads.get(node.index)
                result[node] = (np.zeros_like(node.value) if g is None
                                else np.asarray(g, dtype=np.float64).reshape(node.value.shape))
        return result

    # Convenience wrappers, one per primitive.
    def matmul(self, a, b): return self.record_op("matmul", [a, b])
    def add(self, a, b): return self.record_op("add", [a, b])
    def sub(self, a, b): return self.record_op("sub", [a, b])
    def mul(self, a, b): return self.record_op("mul", [a, b])
    def scale(self, a, c: float): return self.record_op("scale", [a], float(c))
    def shift(self, a, c: float): return self.record_op("shift", [a], float(c))
    def relu(self, a): return self.record_op("relu", [a])
    def sigmoid(self, a): return self.record_op("sigmoid", [a])
    def l2norm(self, a): return self.record_op("l2norm", [a])
    def dot(self, a, b): return self.record_op("dot", [a, b])
    def mean(self, a): return self.record_op("mean", [a])
    def sum(self, a): return self.record_op("sum", [a])
    def add_bias(self, a, b): return self.record_op("add_bias", [a, b])
    def transpose(self, a): return self.record_op("transpose", [a])
    def broadcast_scalar(self, a, shape): return self.record_op("broadcast_scalar", [a], tuple(shape))
    def reshape(self, a, shape): return self.record_op("reshape", [a], tuple(shape))
    def take_rows(self, a, idx): return self.record_op("take_rows", [a], np.asarray(idx, dtype=np.intp))
    def rownorm(self, a): return self.record_op("rownorm", [a])
    def normalize_rows(self, a): return self.record_op("normalize_rows", [a])
    def cosine_rows(self, d, t): return self.record_op("cosine_rows", [d, t])

    def lora_linear(self, H, W0, b, A, B, s):
        """Fused ``H W0^T + b + s (H A^T) B^T`` with ``s`` a scalar node."""
        return self.record_op("lora_linear", [H, W0, b, A, B, s])


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if not step > 0:
        raise ValueError("step must be positive")
    base = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(base))
        flat[i] = orig - step
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradient_of(build: Callable[[Tape, Node], Node], x) -> tuple[float, np.ndarray]:
    """Value and tape gradient of ``build(tape, leaf)`` at ``x``."""
    tape = Tape()
    leaf = tape.leaf(x, trainable=True)
    out = build(tape, leaf)
    return float(out.value), tape.backward(out)[leaf]


def value_of(build: Callable[[Tape, Node], Node], x) -> float:
    tape = Tape()
    return float(build(tape, tape.leaf(x)).value)


def flatten(arrays: Iterable[np.ndarray]) -> np.ndarray:
    arrays = list(arrays)
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])
