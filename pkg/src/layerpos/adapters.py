"""Gated low-rank adapters and the frozen multi-layer backbone that hosts them.

Each layer computes ``(W0 + sigmoid(gate_raw) * gamma * B A) x + bias``.
``W0`` and ``bias`` form the frozen set, ``A`` and ``B`` the adapter
weights, and ``gate_raw`` the per-layer architecture parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffcore import Node, Tape, as_tensor, sigmoid

GROUPS = ("frozen", "lora", "gates")


def _frozen(arr) -> np.ndarray:
    out = np.array(as_tensor(arr), copy=True)
    out.setflags(write=False)
    return out


def adapter_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Generator for one layer's adapter initialization."""
    return np.random.default_rng([int(seed), int(index)])


class GatedLoRALayer:
    """One frozen linear map with a gated low-rank increment."""

    def __init__(self, W0, bias, A, B, gate_raw: float = 0.0, gamma: float = 2.0):
        self.W0 = _frozen(W0)
        self.bias = _frozen(bias)
        self.A = np.array(as_tensor(A), copy=True)
        self.B = np.array(as_tensor(B), copy=True)
        self.gate_raw = np.array(float(gate_raw))
        self.gamma = float(gamma)
        self.gate_fixed: float | None = None
        self.lora_trainable = True
        d_out, d_in = self.W0.shape
        if self.bias.shape != (d_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.W0.shape}")
        r = self.A.shape[0]
        if self.A.shape != (r, d_in) or self.B.shape != (d_out, r):
            raise ValueError(f"factor shapes {self.A.shape}, {self.B.shape} do not match {self.W0.shape}")
        if not 0 < r < min(d_in, d_out):
            raise ValueError(f"rank {r} must lie in [1, min(d_in, d_out) - 1]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def gate(self) -> float:
        """Effective gate value in [0, 1]."""
        if self.gate_fixed is not None:
            return self.gate_fixed
        return float(sigmoid(self.gate_raw))

    def reset(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.d_in)
        self.A[...] = rng.uniform(-bound, bound, self.A.shape)
        self.B[...] = 0.0
        self.gate_raw[...] = 0.0
        self.gate_fixed = None
        self.lora_trainable = True

    def forward(self, tape: Tape, x: Node, train_lora: bool = False, train_gate: bool = False,
                leaves: list | None = None) -> Node:
        """Record the layer on ``tape`` for an input vector or batch of rows.

        Trainable leaves are appended to ``leaves`` as ``(param, node)``.
        """
        if x.value.shape[-1] != self.d_in:
            raise ValueError(f"input width {x.value.shape[-1]} does not match d_in {self.d_in}")
        train_lora = train_lora and self.lora_trainable
        train_gate = train_gate and self.gate_fixed is None
        A = tape.leaf(self.A, trainable=train_lora)
        B = tape.leaf(self.B, trainable=train_lora)
        if train_gate:
            g = tape.leaf(self.gate_raw, trainable=True)
            s = tape.scale(tape.sigmoid(g), self.gamma)
        else:
            s = tape.leaf(np.array(self.gate() * self.gamma))
        if leaves is not None:
            if train_lora:
                leaves.extend([(self.A, A), (self.B, B)])
            if train_gate:
                leaves.append((self.gate_raw, g))
        return tape.lora_linear(x, tape.leaf(self.W0), tape.leaf(self.bias), A, B, s)

    def frozen_output(self, x) -> np.ndarray:
        """Output of the frozen map alone (adapter gated off)."""
        t = Tape()
        zero = t.leaf(np.array(0.0))
        return t.lora_linear(t.leaf(x), t.leaf(self.W0), t.leaf(self.bias),
                             t.leaf(self.A), t.leaf(self.B), zero).value


def init_adapter(W0, bias, rank: int = 8, gamma: float = 2.0, seed: int = 0,
                 rng: np.random.Generator | None = None) -> GatedLoRALayer:
    """Attach a fresh adapter (uniform ``A``, zero ``B``, zero gate) to frozen weights."""
    W0 = as_tensor(W0)
    if W0.ndim != 2:
        raise ValueError("frozen weight must be a matrix")
    d_out, d_in = W0.shape
    if not 0 < rank < min(d_in, d_out):
        raise ValueError(f"rank {rank} must lie in [1, min(d_in, d_out) - 1] = [1, {min(d_in, d_out) - 1}]")
    layer = GatedLoRALayer(W0, bias, np.zeros((rank, d_in)), np.zeros((d_out, rank)), 0.0, gamma)
    layer.reset(rng if rng is not None else adapter_rng(seed))
    return layer


@dataclass
class Bound:
    """Trainable leaves created by one forward pass, in parameter order."""

    params: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    def grads(self, grad_map: dict) -> list:
        return [grad_map[leaf] for leaf in self.leaves]


class Backbone:
    """Stack of gated layers with ReLU between them and a linear output."""

    def __init__(self, layers: Sequence[GatedLoRALayer]):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError("consecutive layer widths do not chain")
        self.selection: tuple[int, ...] | None = None

    @classmethod
    def from_weights(cls, Ws, bs, rank: int = 8, gamma: float = 2.0, seed: int = 0) -> "Backbone":
        return cls([init_adapter(W, b, rank, gamma, rng=adapter_rng(seed, i))
                    for i, (W, b) in enumerate(zip(Ws, bs))])

    @property
    def gamma(self) -> float:
        return self.layers[0].gamma

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    def clone(self) -> "Backbone":
        """Independent copy; frozen arrays are shared since nothing writes them."""
        layers = []
        for l in self.layers:
            c = GatedLoRALayer.__new__(GatedLoRALayer)
            c.__dict__.update(l.__dict__)
            c.A, c.B, c.gate_raw = l.A.copy(), l.B.copy(), l.gate_raw.copy()
            layers.append(c)
        net = Backbone(layers)
        net.selection = self.selection
        return net

    def reset_adapters(self, seed: int) -> None:
        for i, layer in enumerate(self.layers):
            layer.reset(adapter_rng(seed, i))
        self.selection = None

    def gate_raws(self) -> np.ndarray:
        return np.array([float(layer.gate_raw) for layer in self.layers])

    def gates(self) -> np.ndarray:
        return np.array([layer.gate() for layer in self.layers])

    def forward(self, tape: Tape, X: Node, train: Iterable[str] = ()) -> tuple[Node, Bound]:
        """Record the whole network on ``tape``.

        ``train`` names the groups (``"lora"``, ``"gates"``) whose leaves
        should be trainable; frozen weights never are.
        """
        train = set(train)
        unknown = train - {"lora", "gates"}
        if unknown:
            raise ValueError(f"cannot train groups {sorted(unknown)}")
        pairs: list = []
        H = X
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            H = layer.forward(tape, H, "lora" in train, "gates" in train, pairs)
            if i < last:
                H = tape.relu(H)
        order = {id(p): n for n, p in enumerate(self.trainable_params(train))}
        pairs.sort(key=lambda pn: order[id(pn[0])])
        return H, Bound([p for p, _ in pairs], [n for _, n in pairs])

    def predict(self, X) -> np.ndarray:
        t = Tape()
        return self.forward(t, t.leaf(X))[0].value

    def trainable_params(self, train: Iterable[str] = ("lora", "gates")) -> list:
        train = set(train)
        out = []
        if "lora" in train:
            for layer in self.layers:
                if layer.lora_trainable:
                    out.extend([layer.A, layer.B])
        if "gates" in train:
            out.extend(layer.gate_raw for layer in self.layers if layer.gate_fixed is None)
        return out

    def all_params(self) -> list:
        return [p for g in GROUPS for p in collect_params(self, g)]

    def count(self, which: str) -> int:
        return int(sum(p.size for p in collect_params(self, which)))

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.trainable_params()))

    def frozen_digest(self) -> bytes:
        return b"".join(p.tobytes() for p in collect_params(self, "frozen"))

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}

        return {
            "format": "layerpos-backbone/1",
            "gamma": self.gamma,
            "rank": self.rank,
            "selection": None if self.selection is None else list(self.selection),
            "layers": [
                {"W0": enc(l.W0), "bias": enc(l.bias), "A": enc(l.A), "B": enc(l.B),
                 "gate_raw": float(l.gate_raw), "gate_fixed": l.gate_fixed,
                 "lora_trainable": l.lora_trainable}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Backbone":
        def dec(d):
            shape = tuple(int(s) for s in d["shape"])
            data = np.asarray(d["data"], dtype=np.float64)
            if data.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"checkpoint tensor of shape {shape} has {data.size} values")
            return data.reshape(shape)

        try:
            layers = []
            for ld in doc["layers"]:
                layer = GatedLoRALayer(dec(ld["W0"]), dec(ld["bias"]), dec(ld["A"]), dec(ld["B"]),
                                       ld["gate_raw"], doc["gamma"])
                layer.gate_fixed = None if ld["gate_fixed"] is None else float(ld["gate_fixed"])
                layer.lora_trainable = bool(ld["lora_trainable"])
                layers.append(layer)
            net = cls(layers)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"corrupt checkpoint: {exc!r}") from exc
        if doc.get("selection") is not None:
            net.selection = tuple(int(i) for i in doc["selection"])
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Backbone":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt checkpoint: {exc}") from exc
        return cls.from_dict(doc)


def collect_params(backbone: Backbone, which: str) -> list:
    """Parameters of one group in a fixed layer-major order."""
    if which == "frozen":
        return [p for l in backbone.layers for p in (l.W0, l.bias)]
    if which == "lora":
        return [p for l in backbone.layers for p in (l.A, l.B)]
    if which == "gates":
        return [l.gate_raw for l in backbone.layers]
    raise ValueError(f"unknown parameter group {which!r}; expected one of {GROUPS}")


def apply_selection(backbone: Backbone, selected) -> Backbone:
    """Fix gates to 1 on selected layers and 0 elsewhere.

    Adapters of unselected layers leave the trainable set; their gate of 0
    removes them from the forward pass entirely.
    """
    chosen = sorted({int(i) for i in selected})
    for i in chosen:
        if not 0 <= i < backbone.depth:
            raise IndexError(f"layer index {i} outside 0..{backbone.depth - 1}")
    for i, layer in enumerate(backbone.layers):
        on = i in chosen
        layer.gate_fixed = 1.0 if on else 0.0
        layer.lora_trainable = on
    backbone.selection = tuple(chosen)
    return backbone
