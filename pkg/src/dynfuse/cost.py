"""Analytic MAdds accounting and the resource-aware loss terms.

Counting convention, applied uniformly:

* Linear layer ``in -> out``: ``in * out`` per sample (bias adds excluded).
* Elementwise add or multiply over ``d`` features: ``d``.
* SE fusion: both squeeze MLPs + ``2d`` (reweighting) + ``d`` (sum).
* Identity, activations, softmax, concatenation, gathers: 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import tensor as T
from .gating import GateDecision, GateNetwork
from .nn import Linear, Mlp, SeFusionBlock, WeightedAdd
from .tensor import DimensionError, Tensor

__all__ = [
    "CostTable",
    "ResourceLossConfig",
    "count_madds",
    "mixing_cost",
    "normalized_expert_costs",
    "normalized_op_costs",
    "resource_loss_modality",
    "resource_loss_fusion",
    "total_loss",
]


def mixing_cost(branches: int, width: int) -> int:
    """Per-sample MAdds of a soft mixture: scale each branch output, then sum them."""
    return (2 * branches - 1) * width


def count_madds(element, dim: int | None = None) -> int:
    """Per-sample MAdds of an architecture element.

    ``WeightedAdd`` has no intrinsic width, so ``dim`` must be supplied for it.
    Composite objects (experts, fusion ops, whole networks) expose ``madds()``.
    """
    if isinstance(element, Linear):
        return element.in_dim * element.out_dim
    if isinstance(element, Mlp):
        return int(sum(count_madds(layer) for layer in element.layers))
    if isinstance(element, GateNetwork):
        return count_madds(element.body)
    if isinstance(element, SeFusionBlock):
        d = element.dim
        return count_madds(element.squeeze_mlp_1) + count_madds(element.squeeze_mlp_2) + 3 * d
    if isinstance(element, WeightedAdd):
        if dim is None:
            raise DimensionError("WeightedAdd cost needs the feature dim")
        return 3 * dim
    if element is None:
        return 0
    madds = getattr(element, "madds", None)
    if callable(madds):
        return int(madds())
    raise DimensionError(f"cannot count MAdds of undimensioned element {element!r}")


def _freeze(mapping) -> Mapping:
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True)
class CostTable:
    """Per-sample MAdds of every branch, fixed once the architecture is built.

    ``op_costs`` is keyed by ``(cell, op)``; ``block_costs`` maps a modality
    index to its per-block costs.
    """

    expert_costs: Mapping[int, int] = field(default_factory=dict)
    op_costs: Mapping[tuple[int, int], int] = field(default_factory=dict)
    gate_cost: int = 0
    block_costs: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    head_cost: int = 0
    shared_cost: int = 0

    def __post_init__(self):
        object.__setattr__(self, "expert_costs", _freeze({int(k): int(v) for k, v in self.expert_costs.items()}))
        object.__setattr__(self, "op_costs", _freeze({(int(j), int(i)): int(v) for (j, i), v in self.op_costs.items()}))
        object.__setattr__(self, "block_costs", _freeze({int(k): tuple(int(c) for c in v)
                                                         for k, v in self.block_costs.items()}))
        values = [*self.expert_costs.values(), *self.op_costs.values(), self.gate_cost,
                  self.head_cost, self.shared_cost]
        values += [c for v in self.block_costs.values() for c in v]
        if any(v < 0 for v in values):
            raise ValueError("cost table entries must be non-negative")

    @property
    def num_cells(self) -> int:
        return 1 + max((j for j, _ in self.op_costs), default=-1)

    @property
    def num_ops(self) -> int:
        return 1 + max((i for _, i in self.op_costs), default=-1)

    def op_matrix(self) -> np.ndarray:
        """(cells, ops) array of fusion-op costs."""
        m = np.zeros((self.num_cells, self.num_ops))
        for (j, i), c in self.op_costs.items():
            m[j, i] = c
        return m

    def to_dict(self) -> dict:
        return {
            "expert_costs": {str(k): v for k, v in sorted(self.expert_costs.items())},
            "op_costs": {f"{j},{i}": v for (j, i), v in sorted(self.op_costs.items())},
            "gate_cost": self.gate_cost,
            "block_costs": {str(k): list(v) for k, v in sorted(self.block_costs.items())},
            "head_cost": self.head_cost,
            "shared_cost": self.shared_cost,
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ResourceLossConfig:
    lam: float = 0.0
    normalization: str = "cheapest_expert"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.normalization not in ("none", "cheapest_expert"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def normalized_expert_costs(table: CostTable, cfg: ResourceLossConfig) -> np.ndarray:
    costs = np.array([table.expert_costs[k] for k in sorted(table.expert_costs)], dtype=np.float64)
    if cfg.normalization == "cheapest_expert":
        costs = costs / costs.min()
    return costs


def normalized_op_costs(table: CostTable, cfg: ResourceLossConfig) -> np.ndarray:
    costs = table.op_matrix()
    if cfg.normalization == "cheapest_expert":
        # Identity costs 0, so the unit is the cheapest op that costs anything.
        positive = costs[costs > 0]
        if positive.size:
            costs = costs / positive.min()
    return costs


def _gate_tensor(decision) -> Tensor:
    if isinstance(decision, GateDecision):
        return decision.hard if decision.mode == "hard_st" else decision.soft
    return decision


def _expected_cost(g: Tensor, costs: np.ndarray, lam: float) -> Tensor:
    batch = g.shape[0] if g.ndim == 3 else 1
    const = Tensor(np.broadcast_to(costs, g.shape).copy())
    return T.mul(lam / batch, T.sum(T.mul(g, const)))


def resource_loss_modality(decision, table: CostTable, cfg: ResourceLossConfig) -> Tensor:
    """``lam * sum_i g_i * C(E_i)`` averaged over the batch.

    Accepts a single row (B,), a batch (batch, 1, B) or a GateDecision (whose
    straight-through hard tensor is used in ``hard_st`` mode).
    """
    g = _gate_tensor(decision)
    costs = normalized_expert_costs(table, cfg)
    if g.shape[-1] != costs.size or (g.ndim == 3 and g.shape[1] != 1) or g.ndim not in (1, 3):
        raise DimensionError(f"decision shape {g.shape} does not match {costs.size} experts")
    return _expected_cost(g, costs, cfg.lam)


def resource_loss_fusion(decision, table: CostTable, cfg: ResourceLossConfig) -> Tensor:
    """``lam * sum_j sum_i g_i^(j) * C(O_ij)`` averaged over the batch.

    Skipped feature-extraction blocks are not part of this surrogate.
    """
    g = _gate_tensor(decision)
    costs = normalized_op_costs(table, cfg)
    if g.shape[-2:] != costs.shape:
        raise DimensionError(f"decision shape {g.shape} does not match op table {costs.shape}")
    return _expected_cost(g, costs, cfg.lam)


def total_loss(task_loss: Tensor, resource_loss: Tensor) -> Tensor:
    if task_loss.size != 1 or resource_loss.size != 1:
        raise DimensionError("total_loss expects scalar terms")
    return T.add(T.reshape(task_loss, ()), T.reshape(resource_loss, ()))
