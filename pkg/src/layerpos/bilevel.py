"""Bilevel layer positioning: gate hypergradients, top-k selection, two-stage driver.

Stage 1 alternates a gate step driven by the first-order hypergradient
estimate with an adapter step on the training split.  Stage 2 keeps the
top-k layers and fine-tunes only their adapters.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import Backbone, apply_selection
from .config import ExperimentConfig, substream_seed
from .diffcore import Tape, flatten
from .semloss import DirectionalLossContext, displacement_loss

GUARD = 1e-12
POSITIONING = "positioning"
FINETUNING = "finetuning"


class PhaseError(RuntimeError):
    """An epoch operation was called in the wrong stage."""


# ------------------------------------------------------------------ estimator

@dataclass(frozen=True)
class HypergradientEstimate:
    g_alpha: np.ndarray
    projection_coeff: float
    grad_norm_sq: float
    guarded: bool


def hypergradient(grad_alpha_phi, grad_omega_phi, grad_alpha_f, grad_omega_f,
                  guard: float = GUARD) -> HypergradientEstimate:
    """First-order estimate ``g = da_phi - (dw_phi . dw_f / |dw_f|^2) da_f``.

    When ``|dw_f|^2`` falls below ``guard`` the lower level is treated as
    stationary and the correction term is dropped.
    """
    ga_phi = np.asarray(grad_alpha_phi, dtype=np.float64).reshape(-1)
    gw_phi = np.asarray(grad_omega_phi, dtype=np.float64).reshape(-1)
    ga_f = np.asarray(grad_alpha_f, dtype=np.float64).reshape(-1)
    gw_f = np.asarray(grad_omega_f, dtype=np.float64).reshape(-1)
    if ga_phi.shape != ga_f.shape:
        raise ValueError(f"gate gradients differ in length: {ga_phi.size} vs {ga_f.size}")
    if gw_phi.shape != gw_f.shape:
        raise ValueError(f"adapter gradients differ in length: {gw_phi.size} vs {gw_f.size}")
    nsq = float(gw_f @ gw_f)
    if nsq < guard:
        return HypergradientEstimate(ga_phi.copy(), 0.0, nsq, True)
    coeff = float(gw_phi @ gw_f) / nsq
    return HypergradientEstimate(ga_phi - coeff * ga_f, coeff, nsq, False)


def top_k(gate_raws, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` largest gates, ties to the lower index, ascending."""
    raws = np.asarray(gate_raws, dtype=np.float64).reshape(-1)
    if not 1 <= k <= raws.size:
        raise ValueError(f"k = {k} must lie in 1..{raws.size}")
    order = np.argsort(-raws, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


# ------------------------------------------------------------------ optimizers

class Optimizer:
    """In-place update rule over a list of arrays; state is keyed by position."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params, grads) -> None:
        raise NotImplementedError


class GradientDescent(Optimizer):
    def step(self, params, grads):
        if self.lr == 0.0:
            return
        for p, g in zip(params, grads):
            p -= self.lr * g


class Momentum(Optimizer):
    def __init__(self, lr, momentum=0.9):
        super().__init__(lr)
        self.mu = float(momentum)
        self.vel: list | None = None

    def step(self, params, grads):
        if self.vel is None:
            self.vel = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.vel):
            v *= self.mu
            v += g
            p -= self.lr * v


class Adam(Optimizer):
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list | None = None
        self.v: list | None = None

    def step(self, params, grads):
        if self.lr == 0.0:
            return
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "gd":
        return GradientDescent(lr)
    if kind == "momentum":
        return Momentum(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ------------------------------------------------------------------ objectives

class H2CObjective:
    """Directional loss of the backbone's outputs against its inputs."""

    def __init__(self, ctx: DirectionalLossContext):
        self.ctx = ctx

    def __call__(self, tape: Tape, backbone: Backbone, X, train=()):
        Xn = tape.leaf(X)
        out, bound = backbone.forward(tape, Xn, train)
        return displacement_loss(tape, self.ctx, Xn, out).loss, bound


def objective_grads(objective, backbone: Backbone, X, train=()) -> tuple[float, list, list]:
    """Loss value plus gradients over the trainable groups in ``train``."""
    tape = Tape()
    loss, bound = objective(tape, backbone, X, train)
    if not bound.leaves:
        return float(loss.value), [], []
    grads = bound.grads(tape.backward(loss))
    return float(loss.value), bound.params, grads


def objective_value(objective, backbone: Backbone, X) -> float:
    return objective_grads(objective, backbone, X, ())[0]


# ------------------------------------------------------------------ state

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    f_train: float
    phi_val: float
    gates: np.ndarray
    wallclock_ms: float


@dataclass
class BilevelState:
    backbone: Backbone
    objective: object
    eta_w: float
    eta_alpha: float
    T: int
    T_s: int
    k: int
    guard: float = GUARD
    optimizer_w: str = "adam"
    optimizer_alpha: str = "gd"
    momentum: float = 0.9
    epoch: int = 0
    history: list = field(default_factory=list)
    last_estimate: HypergradientEstimate | None = None

    def __post_init__(self):
        if not 0 < self.T_s < self.T:
            raise ValueError(f"need 0 < T_s < T, got T_s = {self.T_s}, T = {self.T}")
        if not 1 <= self.k <= self.backbone.depth:
            raise ValueError(f"k = {self.k} must lie in 1..{self.backbone.depth}")
        self.opt_w = make_optimizer(self.optimizer_w, self.eta_w, self.momentum)
        self.opt_alpha = make_optimizer(self.optimizer_alpha, self.eta_alpha, self.momentum)
        self._t0 = time.perf_counter()

    @classmethod
    def from_config(cls, backbone: Backbone, config: ExperimentConfig, objective) -> "BilevelState":
        return cls(backbone, objective, config.eta_w, config.eta_alpha, config.T, config.T_s,
                   config.k, config.guard, config.optimizer_w, config.optimizer_alpha, config.momentum)

    @property
    def phase(self) -> str:
        return POSITIONING if self.epoch < self.T_s else FINETUNING

    def start_finetuning(self) -> None:
        """Fresh adapter optimizer over the selected layers' weights."""
        self.opt_w = make_optimizer(self.optimizer_w, self.eta_w, self.momentum)

    def _record(self, f_train: float, phi_val: float) -> None:
        ms = (time.perf_counter() - self._t0) * 1e3
        self.history.append(EpochRecord(self.epoch, self.phase, f_train, phi_val,
                                        self.backbone.gates(), ms))


def positioning_epoch(state: BilevelState, train_batch, val_batch) -> BilevelState:
    """One gate step from the hypergradient, then one adapter step at the new gates."""
    if state.phase != POSITIONING:
        raise PhaseError(f"positioning epoch requested during {state.phase}")
    net, obj = state.backbone, state.objective
    n_lora = len(net.trainable_params(("lora",)))
    phi, _, g_phi = objective_grads(obj, net, val_batch, ("lora", "gates"))
    f, _, g_f = objective_grads(obj, net, train_batch, ("lora", "gates"))
    est = hypergradient(flatten(g_phi[n_lora:]), flatten(g_phi[:n_lora]),
                        flatten(g_f[n_lora:]), flatten(g_f[:n_lora]), state.guard)
    state.last_estimate = est
    gates = net.trainable_params(("gates",))
    state.opt_alpha.step(gates, [est.g_alpha[i:i + 1].reshape(()) for i in range(len(gates))])
    _, params, g_w = objective_grads(obj, net, train_batch, ("lora",))
    state.opt_w.step(params, g_w)
    state._record(f, phi)
    state.epoch += 1
    return state


def finetune_epoch(state: BilevelState, train_batch, val_batch=None) -> BilevelState:
    """One adapter step on the selected layers; gates and frozen weights stay put."""
    if state.phase != FINETUNING:
        raise PhaseError(f"finetuning epoch requested during {state.phase}")
    net = state.backbone
    f, params, g_w = objective_grads(state.objective, net, train_batch, ("lora",))
    phi = objective_value(state.objective, net, val_batch) if val_batch is not None else float("nan")
    state.opt_w.step(params, g_w)
    state._record(f, phi)
    state.epoch += 1
    return state


# ------------------------------------------------------------------ driver

@dataclass
class RunResult:
    backbone: Backbone
    selection: tuple
    history: list
    stage1_gates: np.ndarray
    stage1_raws: np.ndarray
    config: ExperimentConfig

    def summary(self) -> dict:
        last = self.history[-1]
        net = self.backbone
        return {
            "selection": list(self.selection),
            "final_f_train": last.f_train,
            "final_phi_val": last.phi_val,
            "stage1_gates": self.stage1_gates.tolist(),
            "stage1_gate_raws": self.stage1_raws.tolist(),
            "trainable_params": net.trainable_count(),
            "frozen_params": net.count("frozen"),
            "lora_params_all_layers": net.count("lora"),
            "epochs": len(self.history),
            "T": self.config.T,
            "T_s": self.config.T_s,
            "k": self.config.k,
        }


def select_and_freeze(backbone: Backbone, k: int, binarize: bool = True,
                      reinit_seed: int | None = None) -> tuple:
    """Top-k selection from the current gates, optionally restarting the adapters."""
    raws = backbone.gate_raws()
    gates = backbone.gates()
    selection = top_k(raws, k)
    if reinit_seed is not None:
        backbone.reset_adapters(reinit_seed)
    apply_selection(backbone, selection)
    if not binarize:
        for i in selection:
            backbone.layers[i].gate_fixed = float(gates[i])
    return selection, gates, raws


def run(config: ExperimentConfig, backbone: Backbone, objective, train_batch, val_batch) -> RunResult:
    """Both stages end to end on an already-initialized backbone."""
    state = BilevelState.from_config(backbone, config, objective)
    for _ in range(config.T_s):
        positioning_epoch(state, train_batch, val_batch)
    reinit = None if config.warm_start_stage2 else substream_seed(config.seed, "init-stage2")
    selection, gates, raws = select_and_freeze(backbone, config.k, config.binarize_gates, reinit)
    state.start_finetuning()
    while state.epoch < config.T:
        finetune_epoch(state, train_batch, val_batch)
    return RunResult(backbone, selection, state.history, gates, raws, config)


def write_metrics(result: RunResult, out_dir) -> None:
    """Per-epoch CSV, timing CSV and JSON summary.

    Wall-clock times live in ``timing.csv`` so that ``metrics.csv`` and
    ``summary.json`` are reproducible bit for bit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depth = result.backbone.depth
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "phase", "f_train", "phi_val"] + [f"gate_{i}" for i in range(depth)])
        for r in result.history:
            w.writerow([r.epoch, r.phase, repr(r.f_train), repr(r.phi_val)] + [repr(float(g)) for g in r.gates])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wallclock_ms"])
        for r in result.history:
            w.writerow([r.epoch, f"{r.wallclock_ms:.3f}"])
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
