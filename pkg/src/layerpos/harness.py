"""Planted-bottleneck task, exhaustive subset oracle and the comparison battery.

The synthetic backbone passes its input through every hidden layer on
signed ReLU carrier pairs ``[Q z, -Q z]``.  Layer 0 additionally feeds a
block of random ReLU features of a small input subspace to layer 1.  The
readout turns the carried input ``x`` into ``x + v (w . x)``, a reflection
of the embedded input across the hyperplane orthogonal to the text
direction, which makes the normalized directional loss exactly zero.

Each planted layer then removes a fraction ``shift_magnitude`` of one
carrier direction that the features never see.  At full magnitude that
information is gone for every later layer, so only an adapter on the
planted layer itself can restore it.  Every hidden unit is finally
permuted and rescaled so the carrier structure is not axis aligned.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group

from .adapters import Backbone, apply_selection
from .bilevel import (
    BilevelState,
    H2CObjective,
    make_optimizer,
    objective_grads,
    objective_value,
    run,
    select_and_freeze,
    finetune_epoch,
)
from .config import ExperimentConfig, substream_seed
from .diffcore import Tape
from .semloss import DirectionalLossContext, FrozenEncoder

ORACLE_LIMIT = 500
FEATURE_RANK = 4
FEATURE_SCALE = 4.0
FEATURE_BIAS = 0.1
N_SOURCE = 512
# Smallest shift magnitude at which the oracle is documented to rank the planted
# set first on the default task (checked per seed by the acceptance suite).
RECOVERABLE_SHIFT = 1.0
METHODS = ("manual-first-k", "manual-last-k", "random-k", "joint-single-level", "bilevel")


class PretrainingError(RuntimeError):
    """The pretrained backbone misses the source mapping by more than the threshold."""


class OracleTooLarge(ValueError):
    """Exhaustive search would score more subsets than allowed."""


@dataclass
class SyntheticTask:
    backbone: Backbone
    ctx: DirectionalLossContext
    source_X: np.ndarray
    source_Y: np.ndarray
    target_train: np.ndarray
    target_val: np.ndarray
    planted: tuple
    v: np.ndarray
    w: np.ndarray
    source_loss: float
    meta: dict = field(default_factory=dict)

    @property
    def objective(self) -> H2CObjective:
        return H2CObjective(self.ctx)

    @property
    def depth(self) -> int:
        return self.backbone.depth

    def target_map(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X + np.outer(X @ self.w, self.v)

    def fresh_backbone(self, seed: int | None = None) -> Backbone:
        """Copy of the pretrained backbone with newly initialized adapters."""
        net = self.backbone.clone()
        net.reset_adapters(self.meta["init_seed"] if seed is None else seed)
        return net

    # ------------------------------------------------------------ persistence

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        self.backbone.save(out / "backbone.json")
        self.ctx.encoder.save(out / "encoder.json")
        self.ctx.save_anchors(out / "anchors.json")
        blobs = {"source_X": self.source_X, "source_Y": self.source_Y, "target_train": self.target_train,
                 "target_val": self.target_val, "v": self.v, "w": self.w}
        for name, arr in blobs.items():
            np.save(out / f"{name}.npy", arr)
        manifest = {"format": "layerpos-task/1", "planted": list(self.planted),
                    "source_loss": self.source_loss, "meta": self.meta,
                    "backbone": "backbone.json", "encoder": "encoder.json", "anchors": "anchors.json",
                    "blobs": {name: f"{name}.npy" for name in blobs}}
        (out / "task.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SyntheticTask":
        base = Path(directory)
        manifest = json.loads((base / "task.json").read_text())
        enc = FrozenEncoder.load(base / manifest["encoder"])
        ctx = DirectionalLossContext.from_anchor_file(enc, base / manifest["anchors"])
        blobs = {k: np.load(base / v) for k, v in manifest["blobs"].items()}
        return cls(Backbone.load(base / manifest["backbone"]), ctx, blobs["source_X"], blobs["source_Y"],
                   blobs["target_train"], blobs["target_val"], tuple(manifest["planted"]),
                   blobs["v"], blobs["w"], float(manifest["source_loss"]), manifest["meta"])


# ------------------------------------------------------------------ construction

def _carrier_block(Q, d, width):
    M = np.zeros((width, width))
    M[:d, :d] = Q
    M[:d, d:2 * d] = -Q
    M[d:2 * d, :d] = -Q
    M[d:2 * d, d:2 * d] = Q
    return M


def make_task(layer_count: int = 6, width: int = 128, planted=(0, 2, 4), shift_magnitude: float = RECOVERABLE_SHIFT,
              seed: int = 0, d: int = 16, e: int = 32, n_target: int = 256, margin: float = 1.0,
              rank: int = 8, gamma: float = 2.0, source_threshold: float = 1e-3) -> SyntheticTask:
    """Build the planted-bottleneck task; identical arguments give identical tasks."""
    planted = tuple(sorted({int(i) for i in planted}))
    if not planted or any(not 0 <= i < layer_count for i in planted):
        raise ValueError(f"planted layers {planted} must be a nonempty subset of 0..{layer_count - 1}")
    if layer_count < 2:
        raise ValueError("need at least two layers")
    if shift_magnitude < 0:
        raise ValueError("shift_magnitude must be non-negative")
    nf = width - 2 * d
    if nf < 0 or FEATURE_RANK >= d:
        raise ValueError(f"width {width} cannot hold the carrier pairs for d = {d}")
    rng = np.random.default_rng(substream_seed(seed, "task"))
    L = layer_count

    Qs = [ortho_group.rvs(d, random_state=rng) for _ in range(L - 1)]
    K = np.linalg.qr(rng.standard_normal((d, FEATURE_RANK)))[0]
    F0 = rng.standard_normal((nf, FEATURE_RANK)) @ K.T / np.sqrt(FEATURE_RANK) * FEATURE_SCALE
    W = [np.vstack([Qs[0], -Qs[0], F0])]
    b = [np.concatenate([np.zeros(2 * d), FEATURE_BIAS * rng.standard_normal(nf)])]
    frames = [Qs[0]]
    for l in range(1, L - 1):
        W.append(_carrier_block(Qs[l], d, width))
        b.append(np.zeros(width))
        frames.append(Qs[l] @ frames[-1])

    P = rng.standard_normal((e, d)) / np.sqrt(d)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    t = P @ v
    wv = -2.0 * P.T @ t / (t @ t)
    readout = (np.eye(d) + np.outer(v, wv)) @ frames[-1].T
    W.append(np.hstack([readout, -readout, np.zeros((d, nf))]))
    b.append(np.zeros(d))

    # Source mapping as a product of the unscrambled linear factors.
    cuts = {}
    for l in planted:
        Kl = frames[l - 1] @ K if l > 0 else K
        z = rng.standard_normal(d)
        z -= Kl @ (Kl.T @ z)
        s = z / np.linalg.norm(z)
        cuts[l] = shift_magnitude * np.outer(s, s)
        if l == 0:
            W[0][:2 * d] -= W[0][:2 * d] @ cuts[l]
        else:
            blk = W[l][:, :d] @ cuts[l]
            rows = slice(0, 2 * d) if l < L - 1 else slice(0, d)
            W[l][rows, :d] -= blk[rows]
            W[l][rows, d:2 * d] += blk[rows]
    R = np.eye(d)
    for l in range(L):
        if l in cuts:
            R = (np.eye(d) - cuts[l]) @ R
        R = (Qs[l] if l < L - 1 else readout) @ R

    for l in range(L - 1):
        perm = rng.permutation(width)
        sc = rng.uniform(0.5, 2.0, width)
        W[l] = W[l][perm] * sc[:, None]
        b[l] = b[l][perm] * sc
        W[l + 1] = W[l + 1][:, perm] / sc[None, :]

    source_X = rng.standard_normal((N_SOURCE, d))
    source_Y = source_X @ R.T
    draws = rng.standard_normal((max(8 * n_target, 1024), d))
    target = draws[draws @ wv > margin]
    if len(target) < n_target:
        raise ValueError(f"only {len(target)} target inputs clear margin {margin}")
    target = target[:n_target]
    half = n_target // 2

    init_seed = substream_seed(seed, "init")
    net = Backbone.from_weights(W, b, rank=rank, gamma=gamma, seed=init_seed)
    source_loss = float(np.mean((net.predict(source_X) - source_Y) ** 2))
    if not source_loss <= source_threshold:
        raise PretrainingError(f"source loss {source_loss:.3e} above threshold {source_threshold:.3e}")
    encoder = FrozenEncoder(P, provenance=f"synthetic projection, seed {seed}", normalize=True)
    Xtr = target[:half]
    ctx = DirectionalLossContext(encoder, P @ (target + np.outer(target @ wv, v)).mean(0),
                                 P @ target.mean(0), provenance=f"synthetic anchors, seed {seed}")
    meta = {"seed": int(seed), "layers": L, "width": width, "d": d, "e": e, "n_target": n_target,
            "margin": margin, "shift_magnitude": float(shift_magnitude), "rank": rank, "gamma": gamma,
            "init_seed": init_seed}
    return SyntheticTask(net, ctx, source_X, source_Y, Xtr, target[half:], planted, v, wv,
                         source_loss, meta)


def task_from_config(config: ExperimentConfig) -> SyntheticTask:
    return make_task(config.layers, config.width, config.planted, config.shift_magnitude, config.seed,
                     config.d, config.e, config.n_target, config.margin, config.rank, config.gamma,
                     config.source_threshold)


# ------------------------------------------------------------------ fine-tuning helpers

def finetune_subset(task: SyntheticTask, subset, steps: int, lr: float = 3e-3, optimizer: str = "adam",
                    seed: int | None = None) -> tuple[float, Backbone]:
    """Fresh adapters on ``subset`` trained for ``steps`` full-batch steps; returns val loss."""
    net = task.fresh_backbone(seed)
    apply_selection(net, subset)
    opt = make_optimizer(optimizer, lr)
    obj = task.objective
    if net.trainable_params():
        for _ in range(steps):
            _, params, grads = objective_grads(obj, net, task.target_train, ("lora",))
            opt.step(params, grads)
    return objective_value(obj, net, task.target_val), net


@dataclass
class OracleResult:
    subset_scores: dict
    best_subset: tuple
    ranking: list

    def rows(self) -> list[dict]:
        return [{"rank": i + 1, "subset": list(s), "val_loss": self.subset_scores[s]}
                for i, s in enumerate(self.ranking)]


def _score_subset(args):
    task, subset, budget, lr = args
    return subset, finetune_subset(task, subset, budget, lr)[0]


def brute_force_oracle(task: SyntheticTask, k: int, finetune_budget: int = 200, lr: float = 3e-3,
                       workers: int = 1) -> OracleResult:
    """Score every k-subset of layers after fine-tuning fresh adapters on it."""
    L = task.depth
    if not 1 <= k <= L:
        raise ValueError(f"k = {k} must lie in 1..{L}")
    if math.comb(L, k) > ORACLE_LIMIT:
        raise OracleTooLarge(f"C({L}, {k}) = {math.comb(L, k)} exceeds {ORACLE_LIMIT}")
    if finetune_budget <= 0:
        raise ValueError("finetune_budget must be positive")
    jobs = [(task, s, finetune_budget, lr) for s in itertools.combinations(range(L), k)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            scores = dict(pool.map(_score_subset, jobs))
    else:
        scores = dict(map(_score_subset, jobs))
    ranking = sorted(scores, key=lambda s: (scores[s], s))
    return OracleResult(scores, ranking[0], ranking)


def evaluate_selection(selection, oracle: OracleResult) -> tuple[int, float]:
    """1-based rank of ``selection`` in the oracle ordering and its relative loss gap."""
    key = tuple(sorted(int(i) for i in selection))
    if key not in oracle.subset_scores:
        raise KeyError(f"selection {key} was not scored by the oracle")
    best = oracle.subset_scores[oracle.best_subset]
    gap = (oracle.subset_scores[key] - best) / best if best > 0 else 0.0
    return oracle.ranking.index(key) + 1, gap


# ------------------------------------------------------------------ methods

def bilevel_method(task: SyntheticTask, config: ExperimentConfig):
    net = task.fresh_backbone()
    return run(config, net, task.objective, task.target_train, task.target_val)


def joint_single_level(task: SyntheticTask, config: ExperimentConfig):
    """Gates and adapters descend the training loss together, then top-k as usual."""
    net = task.fresh_backbone()
    obj = task.objective
    opt_w = make_optimizer(config.optimizer_w, config.eta_w, config.momentum)
    opt_a = make_optimizer(config.optimizer_alpha, config.eta_alpha, config.momentum)
    n_lora = 2 * net.depth
    for _ in range(config.T_s):
        _, params, grads = objective_grads(obj, net, task.target_train, ("lora", "gates"))
        opt_a.step(params[n_lora:], grads[n_lora:])
        opt_w.step(params[:n_lora], grads[:n_lora])
    reinit = None if config.warm_start_stage2 else substream_seed(config.seed, "init-stage2")
    selection, *_ = select_and_freeze(net, config.k, config.binarize_gates, reinit)
    state = BilevelState.from_config(net, config, obj)
    state.epoch = config.T_s
    while state.epoch < config.T:
        finetune_epoch(state, task.target_train)
    return selection, objective_value(obj, net, task.target_val)


def baselines(task: SyntheticTask, config: ExperimentConfig, methods=METHODS) -> list[dict]:
    """Final validation loss and subset per method.

    Fixed-subset methods train fresh adapters for all ``T`` epochs, the same
    epoch budget the two-stage methods spend in total.
    """
    L, k = task.depth, config.k
    rows = []
    for method in methods:
        if method == "manual-first-k":
            sel = tuple(range(k))
        elif method == "manual-last-k":
            sel = tuple(range(L - k, L))
        elif method == "random-k":
            rng = np.random.default_rng(substream_seed(config.seed, "random-k"))
            sel = tuple(sorted(int(i) for i in rng.choice(L, size=k, replace=False)))
        elif method == "joint-single-level":
            sel, loss = joint_single_level(task, config)
            rows.append({"method": method, "selection": list(sel), "val_loss": loss})
            continue
        elif method == "bilevel":
            res = bilevel_method(task, config)
            loss = objective_value(task.objective, res.backbone, task.target_val)
            rows.append({"method": method, "selection": list(res.selection), "val_loss": loss})
            continue
        else:
            raise ValueError(f"unknown method {method!r}")
        loss = finetune_subset(task, sel, config.T, config.eta_w, config.optimizer_w)[0]
        rows.append({"method": method, "selection": list(sel), "val_loss": loss})
    return rows


def layer_count_sweep(task: SyntheticTask, config: ExperimentConfig, k_values) -> list[dict]:
    """Bilevel outcome and trainable-parameter count for each k."""
    out = []
    for k in k_values:
        if not 1 <= k <= task.depth:
            raise ValueError(f"k = {k} must lie in 1..{task.depth}")
        res = bilevel_method(task, config.replace(k=k))
        out.append({"k": k, "selection": list(res.selection),
                    "val_loss": objective_value(task.objective, res.backbone, task.target_val),
                    "trainable_params": res.backbone.trainable_count()})
    return out


def full_finetune(task: SyntheticTask, epochs: int, lr: float = 3e-3, optimizer: str = "adam"):
    """Every frozen weight trainable, no adapters; same per-epoch logging as the adapter run.

    Returns the list of ``(f_train, phi_val)`` per epoch and the trained weights.
    """
    Ws = [np.array(l.W0) for l in task.backbone.layers]
    bs = [np.array(l.bias) for l in task.backbone.layers]
    zeros = [(np.zeros((1, W.shape[1])), np.zeros((W.shape[0], 1))) for W in Ws]
    opt = make_optimizer(optimizer, lr)
    ctx = task.ctx
    from .semloss import displacement_loss

    def loss(X, train):
        tape = Tape()
        Xn = tape.leaf(X)
        H = Xn
        leaves = []
        zero = tape.leaf(np.array(0.0))
        for i, (W, b) in enumerate(zip(Ws, bs)):
            Wn, bn = tape.leaf(W, trainable=train), tape.leaf(b, trainable=train)
            leaves += [Wn, bn]
            H = tape.lora_linear(H, Wn, bn, tape.leaf(zeros[i][0]), tape.leaf(zeros[i][1]), zero)
            if i < len(Ws) - 1:
                H = tape.relu(H)
        node = displacement_loss(tape, ctx, Xn, H).loss
        if not train:
            return float(node.value), None
        g = tape.backward(node)
        return float(node.value), [g[n] for n in leaves]

    history = []
    params = [p for pair in zip(Ws, bs) for p in pair]
    for _ in range(epochs):
        f, grads = loss(task.target_train, True)
        phi, _ = loss(task.target_val, False)
        opt.step(params, grads)
        history.append((f, phi))
    return history, Ws, bs
