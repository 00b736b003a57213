"""Fusion-level dynamic fusion: stacked fusion cells under one global gate.

Two feature-extraction chains (one per modality) are interleaved with fusion
cells. The gate sees both streams after block 1 and picks one operation per
cell. Modality-2 blocks whose output no later selected operation reads are
never executed.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cost import CostTable, count_madds, mixing_cost
from .gating import GateDecision, GateNetwork, forced_decision, gate_forward, route_through
from .nn import Mlp, Module, SeFusionBlock, WeightedAdd, init_parameters
from .tensor import DimensionError, Tensor

__all__ = [
    "FusionOpKind",
    "FusionOp",
    "FusionCell",
    "FusionConfig",
    "FusionNetwork",
    "FusionOutput",
    "ExecutionPlan",
    "build_fusion_network",
    "decision_to_architecture",
    "modality2_needed",
    "fusion_forward",
    "fusion_cost_table",
    "random_decision",
]


class FusionOpKind(str, enum.Enum):
    IDENTITY = "identity"
    ADD = "add"
    WEIGHTED_ADD = "weighted_add"
    SE_FUSE = "se_fuse"


class FusionOp(Module):
    def __init__(self, kind: FusionOpKind | str, dim: int, se_reduction: int = 4):
        self.kind = FusionOpKind(kind)
        self.dim = dim
        self.module = None
        if self.kind is FusionOpKind.WEIGHTED_ADD:
            self.module = WeightedAdd()
        elif self.kind is FusionOpKind.SE_FUSE:
            self.module = SeFusionBlock(dim, se_reduction)

    @property
    def uses_second_stream(self) -> bool:
        return self.kind is not FusionOpKind.IDENTITY

    def __call__(self, x1: Tensor, x2: Tensor | None) -> Tensor:
        if self.kind is FusionOpKind.IDENTITY:
            return x1
        if x2 is None or x1.shape != x2.shape:
            raise DimensionError(f"{self.kind.value} needs two equal-shape streams")
        if self.kind is FusionOpKind.ADD:
            return T.add(x1, x2)
        return self.module(x1, x2)

    def madds(self) -> int:
        if self.kind is FusionOpKind.IDENTITY:
            return 0
        if self.kind is FusionOpKind.ADD:
            return self.dim
        return count_madds(self.module, dim=self.dim)


class FusionCell(Module):
    def __init__(self, ops: Sequence[FusionOp]):
        if len(ops) < 2:
            raise DimensionError("a fusion cell needs at least two operations")
        self.ops = list(ops)

    @property
    def cost_madds(self) -> list[int]:
        return [count_madds(op) for op in self.ops]


@dataclass
class FusionConfig:
    modality_dims: tuple[int, int] = (32, 32)
    block_dim: int = 32
    num_cells: int = 4
    ops: tuple[str, ...] = ("identity", "se_fuse")
    se_reduction: int = 4
    gate_hidden: tuple[int, ...] = (16,)
    head_hidden: int = 16
    n_outputs: int = 2
    activation: str = "relu"

    def __post_init__(self):
        self.modality_dims = tuple(int(d) for d in self.modality_dims)
        self.ops = tuple(FusionOpKind(o).value for o in self.ops)
        self.gate_hidden = tuple(int(h) for h in self.gate_hidden)
        if len(self.modality_dims) != 2 or min(self.modality_dims) <= 0:
            raise DimensionError(f"fusion network takes two positive modality dims, got {self.modality_dims}")
        if self.num_cells < 1 or len(self.ops) < 2:
            raise DimensionError("need at least one cell and two operations")
        if min(self.block_dim, self.head_hidden, self.n_outputs) <= 0:
            raise DimensionError("layer widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class FusionNetwork(Module):
    kind = "fusion_net"

    def __init__(self, config: FusionConfig, blocks_1: list[Mlp], blocks_2: list[Mlp],
                 cells: list[FusionCell], global_gate: GateNetwork, head: Mlp):
        F = len(cells)
        if not (len(blocks_1) == len(blocks_2) == F == global_gate.slots):
            raise DimensionError("blocks, cells and gate slots must agree")
        self.config = config
        self.blocks_1 = blocks_1
        self.blocks_2 = blocks_2
        self.cells = cells
        self.global_gate = global_gate
        self.head = head
        self._cost_table: CostTable | None = None

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_ops(self) -> int:
        return len(self.cells[0].ops)

    def identity_mask(self) -> np.ndarray:
        """(cells, ops) boolean array, True where the op ignores modality 2."""
        return np.array([[not op.uses_second_stream for op in c.ops] for c in self.cells])

    def gate_parameters(self) -> list[Tensor]:
        return self.global_gate.parameters()

    def backbone_parameters(self) -> list[Tensor]:
        gate_ids = {id(p) for p in self.gate_parameters()}
        return [p for p in self.parameters() if id(p) not in gate_ids]

    def cost_table(self) -> CostTable:
        if self._cost_table is None:
            self._cost_table = fusion_cost_table(self)
        return self._cost_table

    def cheapest_branch(self) -> int:
        """Op index with the lowest total cost across cells."""
        return int(np.argmin(self.cost_table().op_matrix().sum(axis=0)))


def build_fusion_network(config: FusionConfig | None = None, seed: int = 0) -> FusionNetwork:
    config = config or FusionConfig()
    act = config.activation
    d = config.block_dim

    def chain(in_dim: int) -> list[Mlp]:
        return [Mlp([in_dim if j == 0 else d, d], activation=act, out_activation=act)
                for j in range(config.num_cells)]

    cells = [FusionCell([FusionOp(k, d, config.se_reduction) for k in config.ops])
             for _ in range(config.num_cells)]
    gate = GateNetwork(2 * d, config.gate_hidden, branches=len(config.ops), slots=config.num_cells,
                       activation=act)
    head = Mlp([d, config.head_hidden, config.n_outputs], activation=act)
    net = FusionNetwork(config, chain(config.modality_dims[0]), chain(config.modality_dims[1]), cells, gate, head)
    init_parameters(net, seed)
    return net


def fusion_cost_table(net: FusionNetwork) -> CostTable:
    return CostTable(
        op_costs={(j, i): count_madds(op) for j, cell in enumerate(net.cells) for i, op in enumerate(cell.ops)},
        gate_cost=count_madds(net.global_gate),
        block_costs={0: [count_madds(b) for b in net.blocks_1], 1: [count_madds(b) for b in net.blocks_2]},
        head_cost=count_madds(net.head),
    )


def modality2_needed(selected: np.ndarray, identity: np.ndarray) -> np.ndarray:
    """Which modality-2 blocks must run, per sample.

    Block ``j`` runs iff some cell ``k >= j`` selected an op that reads
    modality 2; block 0 always runs because it feeds the gate.
    ``selected`` is (batch, cells), ``identity`` is (cells, ops).
    """
    selected = np.atleast_2d(selected)
    cells = np.arange(selected.shape[1])
    uses = ~identity[cells[None, :], selected]
    need = np.flip(np.logical_or.accumulate(np.flip(uses, axis=1), axis=1), axis=1)
    need[:, 0] = True
    return need


@dataclass(frozen=True)
class ExecutionPlan:
    """Execute/skip flag per modality-2 block and the chosen op per cell."""

    execute_block2: tuple[bool, ...]
    ops: tuple[int, ...]


def decision_to_architecture(decision, F: int, identity: np.ndarray | None = None) -> ExecutionPlan:
    """Plan for one sample.

    ``decision`` is a GateDecision (first sample used) or a sequence of op
    indices. Without an ``identity`` mask, op 0 is taken to be the identity.
    """
    sel = decision.selected[0] if isinstance(decision, GateDecision) else np.asarray(decision)
    sel = np.asarray(sel, dtype=np.int64).reshape(-1)
    if sel.size != F:
        raise DimensionError(f"decision has {sel.size} slots, expected {F}")
    if identity is None:
        B = int(sel.max()) + 1 if sel.size else 1
        identity = np.zeros((F, max(B, 2)), dtype=bool)
        identity[:, 0] = True
    need = modality2_needed(sel[None, :], identity)[0]
    return ExecutionPlan(tuple(bool(b) for b in need), tuple(int(i) for i in sel))


def random_decision(F: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random path: one op index per cell."""
    return rng.integers(0, B, size=F)


@dataclass
class FusionOutput:
    y: Tensor
    decision: GateDecision
    cost: np.ndarray = field(repr=False)


def fusion_forward(net: FusionNetwork, x1: Tensor, x2: Tensor, mode: str = "hard_inference", tau: float = 1.0,
                   rng: np.random.Generator | None = None, decision: GateDecision | None = None,
                   skip: bool = True) -> FusionOutput:
    """Forward pass returning output, decision and per-sample MAdds.

    ``skip=False`` runs every modality-2 block on every sample and discards the
    unused rows; the output is bit-identical to the skipping path. A supplied
    ``decision`` bypasses the gate and the gate cost is not charged.
    """
    n = x1.shape[0]
    d1, d2 = net.config.modality_dims
    if x1.shape != (n, d1) or x2.shape != (n, d2):
        raise DimensionError(f"inputs {x1.shape}, {x2.shape} do not match ({n}, {d1}), ({n}, {d2})")
    table = net.cost_table()
    F, B = net.num_cells, net.num_ops
    b1, b2 = table.block_costs[0], table.block_costs[1]
    op_costs = table.op_matrix().astype(np.int64)

    s1 = net.blocks_1[0](x1)
    s2 = net.blocks_2[0](x2)
    cost = np.full(n, b1[0] + b2[0] + table.head_cost, dtype=np.int64)
    if decision is None:
        decision = gate_forward(net.global_gate, [s1, s2], mode, tau, rng)
        cost += table.gate_cost
    elif decision.selected.shape != (n, F):
        raise DimensionError(f"decision shape {decision.selected.shape} does not match ({n}, {F})")
    mode = decision.mode

    if mode == "soft":
        soft = T.reshape(decision.soft, (n, F * B))
        for j, cell in enumerate(net.cells):
            if j > 0:
                s1 = net.blocks_1[j](s1)
                s2 = net.blocks_2[j](s2)
            fused = None
            for i, op in enumerate(cell.ops):
                h = T.scale_rows(op(s1, s2), T.column(soft, j * B + i))
                fused = h if fused is None else T.add(fused, h)
            s1 = fused
        cost += sum(b1[1:]) + sum(b2[1:]) + int(op_costs.sum()) + F * mixing_cost(B, net.config.block_dim)
        return FusionOutput(net.head(s1), decision, cost)

    selected = decision.selected
    need = modality2_needed(selected, net.identity_mask())
    hard = T.reshape(decision.hard, (n, F * B)) if mode == "hard_st" and decision.hard.requires_grad else None
    rows2 = np.arange(n)
    for j, cell in enumerate(net.cells):
        if j > 0:
            s1 = net.blocks_1[j](s1)
            cost += b1[j]
            if skip:
                keep = np.flatnonzero(need[:, j])
                if keep.size < rows2.size:
                    s2 = T.take_rows(s2, np.searchsorted(rows2, keep))
                    rows2 = keep
                if rows2.size:
                    s2 = net.blocks_2[j](s2)
                cost[rows2] += b2[j]
            else:
                s2 = net.blocks_2[j](s2)
                cost += b2[j]
        parts, order = [], []
        for i, op in enumerate(cell.ops):
            idx = np.flatnonzero(selected[:, j] == i)
            if idx.size == 0:
                continue
            a = T.take_rows(s1, idx)
            b = T.take_rows(s2, np.searchsorted(rows2, idx)) if op.uses_second_stream else None
            h = op(a, b)
            if hard is not None:
                h = route_through(h, T.take_rows(T.column(hard, j * B + i), idx))
            parts.append(h)
            order.append(idx)
            cost[idx] += op_costs[j, i]
        restore = np.argsort(np.concatenate(order), kind="stable")
        s1 = T.take_rows(parts[0] if len(parts) == 1 else T.concat(parts, axis=0), restore)
    return FusionOutput(net.head(s1), decision, cost)


def static_fusion_decision(n: int, F: int, op: int, branches: int) -> GateDecision:
    return forced_decision(np.full((n, F), op), branches)
