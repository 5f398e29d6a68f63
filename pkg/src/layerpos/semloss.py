"""Directional text-anchored loss over a frozen embedding provider.

The loss for one sample is ``1 - cos(v_out - v_in, t_pos - t_neg)``: the
model's input-to-output displacement in embedding space should point the
same way as the displacement between the two anchor embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Node, Tape, as_tensor

EPS = 1e-8


class DegenerateDisplacement(ValueError):
    """The output coincides with the input in embedding space."""


class AllDegenerateBatch(DegenerateDisplacement):
    """Every sample of a batch had a degenerate displacement."""


def _readonly(arr) -> np.ndarray:
    arr = np.array(as_tensor(arr), copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FrozenEncoder:
    """Fixed linear map from model space (``d``) to embedding space (``e``).

    With ``normalize`` set, each embedding is scaled to unit length after
    projection, as CLIP-style encoders do.
    """

    projection: np.ndarray
    provenance: str = ""
    normalize: bool = False

    def __post_init__(self):
        proj = _readonly(self.projection)
        if proj.ndim != 2:
            raise ValueError(f"projection must be a matrix, got shape {proj.shape}")
        object.__setattr__(self, "projection", proj)

    @property
    def e(self) -> int:
        return self.projection.shape[0]

    @property
    def d(self) -> int:
        return self.projection.shape[1]

    def project(self, x) -> np.ndarray:
        """Linear part of the embedding for a vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.projection.T

    def embed_value(self, x) -> np.ndarray:
        E = self.project(x)
        if self.normalize:
            E = E / np.linalg.norm(E, axis=-1, keepdims=True)
        return E

    def save(self, path) -> None:
        doc = {
            "shape": list(self.projection.shape),
            "data": self.projection.reshape(-1).tolist(),
            "provenance": self.provenance,
            "normalize": self.normalize,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "FrozenEncoder":
        doc = json.loads(Path(path).read_text())
        shape = tuple(doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
        if len(shape) != 2 or data.size != shape[0] * shape[1]:
            raise ValueError("encoder file shape header does not match its data")
        return cls(data.reshape(shape), doc.get("provenance", ""), bool(doc.get("normalize", False)))


@dataclass(frozen=True)
class DirectionalLossContext:
    """Encoder plus the positive and negative anchor embeddings."""

    encoder: FrozenEncoder
    t_pos: np.ndarray
    t_neg: np.ndarray
    eps: float = EPS
    provenance: str = ""
    direction: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tp, tn = _readonly(self.t_pos), _readonly(self.t_neg)
        if tp.shape != (self.encoder.e,) or tn.shape != (self.encoder.e,):
            raise ValueError(f"anchors must have dimension {self.encoder.e}")
        direction = tp - tn
        if not np.linalg.norm(direction) > self.eps:
            raise ValueError("positive and negative anchors are not distinct")
        direction.setflags(write=False)
        object.__setattr__(self, "t_pos", tp)
        object.__setattr__(self, "t_neg", tn)
        object.__setattr__(self, "direction", direction)

    def save_anchors(self, path) -> None:
        doc = {"dim": int(self.encoder.e), "t_pos": self.t_pos.tolist(),
               "t_neg": self.t_neg.tolist(), "provenance": self.provenance}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_anchor_file(cls, encoder: FrozenEncoder, path, eps: float = EPS) -> "DirectionalLossContext":
        doc = json.loads(Path(path).read_text())
        tp = np.asarray(doc["t_pos"], dtype=np.float64)
        tn = np.asarray(doc["t_neg"], dtype=np.float64)
        if int(doc["dim"]) != tp.size or tp.size != tn.size:
            raise ValueError("anchor file dimension does not match its vectors")
        return cls(encoder, tp, tn, eps, doc.get("provenance", ""))


def embed(tape: Tape, encoder: FrozenEncoder, x: Node) -> Node:
    """Embed one model-space vector on the tape."""
    if x.value.shape != (encoder.d,):
        raise ValueError(f"expected a vector of dimension {encoder.d}, got {x.value.shape}")
    out = tape.matmul(tape.leaf(encoder.projection), x)
    if encoder.normalize:
        out = tape.reshape(tape.normalize_rows(tape.reshape(out, (1, encoder.e))), (encoder.e,))
    return out


def embed_rows(tape: Tape, encoder: FrozenEncoder, X: Node) -> Node:
    """Embed every row of a batch ``[n x d]`` on the tape."""
    if X.value.ndim != 2 or X.value.shape[1] != encoder.d:
        raise ValueError(f"expected rows of dimension {encoder.d}, got {X.value.shape}")
    out = tape.matmul(X, tape.leaf(np.ascontiguousarray(encoder.projection.T)))
    if encoder.normalize:
        out = tape.normalize_rows(out)
    return out


def h2c_node(tape: Tape, ctx: DirectionalLossContext, v_in: Node, v_out: Node) -> Node:
    """Loss of one embedding pair, differentiable in both ends."""
    e = ctx.encoder.e
    D = tape.sub(v_out, v_in)
    if not np.linalg.norm(D.value) > ctx.eps:
        raise DegenerateDisplacement("displacement norm is below eps")
    cos = tape.cosine_rows(tape.reshape(D, (1, e)), tape.leaf(ctx.direction))
    return tape.shift(tape.scale(tape.sum(cos), -1.0), 1.0)


def h2c_loss(ctx: DirectionalLossContext, v_in, v_out) -> float:
    """Plain-value loss of one embedding pair."""
    t = Tape()
    return float(h2c_node(t, ctx, t.leaf(v_in), t.leaf(v_out)).value)


@dataclass
class BatchLoss:
    loss: Node
    used: int
    skipped: int


def displacement_loss(tape: Tape, ctx: DirectionalLossContext, X: Node, Y: Node) -> BatchLoss:
    """Mean loss over rows of model inputs ``X`` and outputs ``Y``."""
    if X.value.shape != Y.value.shape:
        raise ValueError(f"inputs {X.value.shape} and outputs {Y.value.shape} differ")
    if X.value.shape[0] == 0:
        raise ValueError("empty batch")
    D = tape.sub(embed_rows(tape, ctx.encoder, Y), embed_rows(tape, ctx.encoder, X))
    norms = np.sqrt(np.einsum("ij,ij->i", D.value, D.value))
    keep = np.flatnonzero(norms > ctx.eps)
    if keep.size == 0:
        raise AllDegenerateBatch("every sample in the batch is degenerate")
    skipped = int(D.value.shape[0] - keep.size)
    if skipped:
        D = tape.take_rows(D, keep)
    cos = tape.cosine_rows(D, tape.leaf(ctx.direction))
    loss = tape.shift(tape.scale(tape.mean(cos), -1.0), 1.0)
    return BatchLoss(loss, int(keep.size), skipped)


def batched_h2c(ctx: DirectionalLossContext, model, inputs, tape: Tape | None = None) -> BatchLoss:
    """Mean loss of ``model`` over a batch of input rows.

    ``model(tape, X)`` must return the output node for the input node ``X``.
    """
    tape = tape or Tape()
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("batch must be a non-empty matrix of rows")
    X = tape.leaf(inputs)
    return displacement_loss(tape, ctx, X, model(tape, X))
