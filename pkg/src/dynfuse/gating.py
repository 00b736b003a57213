"""Gate networks with Gumbel-softmax relaxation and straight-through hardening."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Mlp, Module
from .tensor import DimensionError, Tensor

__all__ = [
    "GATE_MODES",
    "GateNetwork",
    "GateDecision",
    "AnnealSchedule",
    "sample_gumbel",
    "soft_gate",
    "straight_through",
    "route_through",
    "one_hot",
    "anneal_tau",
    "gate_forward",
    "forced_decision",
]

GATE_MODES = ("soft", "hard_st", "hard_inference")

_U_LO = 1e-12
_U_HI = 1.0 - 1e-12


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0, 1) draws ``-log(-log(u))`` with ``u`` clamped away from 0 and 1."""
    u = np.clip(rng.random(shape), _U_LO, _U_HI)
    return -np.log(-np.log(u))


def soft_gate(logits: Tensor, gumbel, tau: float) -> Tensor:
    """``softmax((logits + gumbel) / tau)`` over the last axis.

    Fused into one node so the relaxation shows up as a softmax (zero MAdds)
    rather than as elementwise arithmetic.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = np.zeros_like(logits.data) if gumbel is None else np.asarray(
        gumbel.data if isinstance(gumbel, Tensor) else gumbel, dtype=np.float64
    )
    if noise.shape != logits.shape:
        raise DimensionError(f"gumbel shape {noise.shape} does not match logits {logits.shape}")
    z = (logits.data + noise) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(p, (logits,), "soft_gate")

    def _backward(g: np.ndarray):
        inner = (g * p).sum(axis=-1, keepdims=True)
        yield logits, p * (g - inner) / tau

    out._backward = _backward
    return out


def one_hot(index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index)
    return (index[..., None] == np.arange(n)).astype(np.float64)


def straight_through(soft: Tensor) -> Tensor:
    """One-hot of the argmax in the forward pass; identity gradient to ``soft``."""
    hard = one_hot(T.max_index(soft, -1), soft.shape[-1])
    out = Tensor._result(hard, (soft,), "straight_through")

    def _backward(g: np.ndarray):
        yield soft, g

    out._backward = _backward
    return out


def route_through(y: Tensor, gate_value: Tensor) -> Tensor:
    """Attach a hard gate value (exactly 1 for every row) to a branch output.

    The forward pass returns ``y`` untouched, so no multiplies are executed;
    the backward pass is that of ``y * gate_value[:, None]``.
    """
    if y.ndim != 2 or gate_value.shape != (y.shape[0],):
        raise DimensionError(f"route_through shape mismatch: {y.shape} and {gate_value.shape}")
    if not np.all(gate_value.data == 1.0):
        raise ValueError("route_through requires a selected (value 1) gate entry for every row")
    out = Tensor._result(y.data, (y, gate_value), "route_through")

    def _backward(g: np.ndarray):
        yield y, g
        yield gate_value, (g * y.data).sum(axis=1)

    out._backward = _backward
    return out


@dataclass(frozen=True)
class AnnealSchedule:
    tau0: float = 1.0
    tauT: float = 1.0
    total_epochs: int = 1
    kind: str = "constant"

    def __post_init__(self):
        if not (self.tau0 > 0 and self.tauT > 0):
            raise ValueError("temperatures must be positive")
        if self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive")
        if self.kind not in ("constant", "exponential"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def anneal_tau(schedule: AnnealSchedule, epoch: int) -> float:
    """Temperature at ``epoch``; exponential schedules hit both endpoints exactly."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.kind == "constant" or epoch == 0:
        return float(schedule.tau0)
    if epoch == schedule.total_epochs:
        return float(schedule.tauT)
    return float(schedule.tau0 * (schedule.tauT / schedule.tau0) ** (epoch / schedule.total_epochs))


@dataclass
class GateDecision:
    """Per-sample gate output.

    ``soft`` and ``hard`` have shape (batch, slots, B); ``selected`` is an
    integer array of shape (batch, slots).
    """

    soft: Tensor
    hard: Tensor
    selected: np.ndarray
    mode: str

    @property
    def slots(self) -> int:
        return self.selected.shape[1]

    @property
    def branches(self) -> int:
        return self.soft.shape[-1]


class GateNetwork(Module):
    """MLP from concatenated features to ``slots * branches`` logits."""

    def __init__(self, in_dim: int, hidden: Sequence[int], branches: int, slots: int = 1,
                 activation: str = "relu"):
        if branches < 2 or slots < 1:
            raise DimensionError(f"gate needs branches >= 2 and slots >= 1, got {branches}, {slots}")
        self.branches = branches
        self.slots = slots
        self.body = Mlp([in_dim, *hidden, slots * branches], activation=activation)

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    def logits(self, features: Sequence[Tensor]) -> Tensor:
        x = features[0] if len(features) == 1 else T.concat(list(features), axis=1)
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"gate expects {self.in_dim} input features, got {x.shape[1]}")
        out = self.body(x)
        return T.reshape(out, (x.shape[0], self.slots, self.branches))


def gate_forward(gate: GateNetwork, features: Sequence[Tensor], mode: str, tau: float = 1.0,
                 rng: np.random.Generator | None = None) -> GateDecision:
    """Run the gate and turn its logits into per-slot decisions.

    ``soft`` and ``hard_st`` add Gumbel noise when ``rng`` is given;
    ``hard_inference`` never samples and takes the argmax of the raw logits.
    """
    if mode not in GATE_MODES:
        raise ValueError(f"unknown gate mode {mode!r}")
    logits = gate.logits(features)
    if mode == "hard_inference":
        selected = T.max_index(logits, -1)
        hard = Tensor(one_hot(selected, gate.branches))
        soft = soft_gate(logits, None, tau)
        return GateDecision(soft=soft, hard=hard, selected=selected, mode=mode)
    gumbel = sample_gumbel(logits.shape, rng) if rng is not None else None
    soft = soft_gate(logits, gumbel, tau)
    selected = T.max_index(soft, -1)
    if mode == "hard_st":
        hard = straight_through(soft)
    else:
        hard = Tensor(one_hot(selected, gate.branches))
    return GateDecision(soft=soft, hard=hard, selected=selected, mode=mode)


def forced_decision(selected, branches: int, mode: str = "hard_inference") -> GateDecision:
    """A constant decision, used for static baselines and random stage-1 paths."""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.ndim != 2:
        raise DimensionError(f"selected must be (batch, slots), got shape {selected.shape}")
    hard = Tensor(one_hot(selected, branches))
    return GateDecision(soft=hard, hard=hard, selected=selected, mode=mode)
