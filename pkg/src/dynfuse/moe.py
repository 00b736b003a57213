"""Modality-level dynamic fusion: a gate picks one expert network per sample."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cost import CostTable, count_madds, mixing_cost
from .gating import GateDecision, GateNetwork, forced_decision, gate_forward, route_through
from .nn import Mlp, Module, init_parameters
from .tensor import DimensionError, Tensor

__all__ = [
    "MoeConfig",
    "Expert",
    "ModalityMoe",
    "MoeOutput",
    "enumerate_subsets",
    "build_two_expert_model",
    "build_subset_model",
    "build_model",
    "moe_forward",
    "moe_cost_table",
    "route_rows",
    "static_decision",
]


@dataclass
class MoeConfig:
    """Architecture of a modality-level model.

    ``expert_subsets`` lists 0-based modality indices per expert; ``None``
    means the default pair (dominant-modality expert, all-modality late fusion).
    """

    modality_dims: tuple[int, ...] = (32, 32)
    n_outputs: int = 2
    cheap_hidden: int = 16
    encoder_dim: int = 64
    fusion_hidden: int = 32
    gate_hidden: tuple[int, ...] = (16,)
    dominant: int = 0
    gate_input: str = "raw"
    expert_subsets: list[list[int]] | None = None
    activation: str = "relu"

    def __post_init__(self):
        self.modality_dims = tuple(int(d) for d in self.modality_dims)
        self.gate_hidden = tuple(int(h) for h in self.gate_hidden)
        if not self.modality_dims or any(d <= 0 for d in self.modality_dims):
            raise DimensionError(f"invalid modality dims {self.modality_dims}")
        if min(self.n_outputs, self.cheap_hidden, self.encoder_dim, self.fusion_hidden) <= 0:
            raise DimensionError("layer widths must be positive")
        if not 0 <= self.dominant < len(self.modality_dims):
            raise DimensionError(f"dominant modality {self.dominant} out of range")
        if self.gate_input not in ("raw", "encoded"):
            raise ValueError(f"gate_input must be 'raw' or 'encoded', got {self.gate_input!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Expert(Module):
    """Per-modality encoders, concatenation, then a decoder MLP.

    Single-modality experts skip the encoder and feed the decoder directly.
    """

    def __init__(self, id: int, modality_subset: Sequence[int], encoders: Sequence[Mlp] | None, decoder: Mlp):
        if not modality_subset:
            raise DimensionError("expert needs a non-empty modality subset")
        self.id = id
        self.modality_subset = tuple(modality_subset)
        self.encoders = list(encoders) if encoders else []
        self.decoder = decoder

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        """``inputs`` holds the features of this expert's modalities, in subset order."""
        if len(inputs) != len(self.modality_subset):
            raise DimensionError(f"expert {self.id} needs {len(self.modality_subset)} inputs, got {len(inputs)}")
        if self.encoders:
            feats = [enc(x) for enc, x in zip(self.encoders, inputs)]
            h = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        else:
            h = inputs[0] if len(inputs) == 1 else T.concat(list(inputs), axis=1)
        return self.decoder(h)

    def madds(self) -> int:
        return sum(count_madds(e) for e in self.encoders) + count_madds(self.decoder)


class ModalityMoe(Module):
    kind = "modality_moe"

    def __init__(self, config: MoeConfig, experts: list[Expert], gate: GateNetwork,
                 shared_encoders: list[Mlp] | None = None):
        if len(experts) < 2:
            raise DimensionError("need at least two experts")
        self.config = config
        self.experts = experts
        self.gate = gate
        self.shared_encoders = shared_encoders or []
        self.num_modalities = len(config.modality_dims)
        self._cost_table: CostTable | None = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def gate_parameters(self) -> list[Tensor]:
        return self.gate.parameters()

    def backbone_parameters(self) -> list[Tensor]:
        gate_ids = {id(p) for p in self.gate_parameters()}
        return [p for p in self.parameters() if id(p) not in gate_ids]

    def cost_table(self) -> CostTable:
        if self._cost_table is None:
            self._cost_table = moe_cost_table(self)
        return self._cost_table

    def cheapest_branch(self) -> int:
        costs = self.cost_table().expert_costs
        return min(costs, key=lambda k: (costs[k], k))

    def encode(self, x: Sequence[Tensor]) -> list[Tensor]:
        """Inputs as seen by experts and gate (identity for raw gating)."""
        if self.shared_encoders:
            return [enc(xm) for enc, xm in zip(self.shared_encoders, x)]
        return list(x)

    def expert_forward(self, i: int, x: Sequence[Tensor]) -> Tensor:
        """Run expert ``i`` alone on full-modality inputs."""
        feats = self.encode(x)
        e = self.experts[i]
        return e([feats[m] for m in e.modality_subset])


def enumerate_subsets(num_modalities: int) -> list[list[int]]:
    """All non-empty modality subsets, smallest first."""
    out = []
    for r in range(1, num_modalities + 1):
        out.extend(list(c) for c in itertools.combinations(range(num_modalities), r))
    return out


def _input_dims(config: MoeConfig) -> list[int]:
    if config.gate_input == "encoded":
        return [config.encoder_dim] * len(config.modality_dims)
    return list(config.modality_dims)


def _make_expert(i: int, subset: Sequence[int], config: MoeConfig) -> Expert:
    dims = _input_dims(config)
    act = config.activation
    if len(subset) == 1:
        decoder = Mlp([dims[subset[0]], config.cheap_hidden, config.n_outputs], activation=act)
        return Expert(i, subset, None, decoder)
    if config.gate_input == "encoded":
        # Inputs are already encoded by the shared encoders.
        encoders = None
        fused = sum(dims[m] for m in subset)
    else:
        encoders = [Mlp([dims[m], config.encoder_dim], activation=act, out_activation=act) for m in subset]
        fused = config.encoder_dim * len(subset)
    decoder = Mlp([fused, config.fusion_hidden, config.n_outputs], activation=act)
    return Expert(i, subset, encoders, decoder)


def build_subset_model(config: MoeConfig, seed: int = 0) -> ModalityMoe:
    subsets = config.expert_subsets
    if subsets is None:
        subsets = [[config.dominant], list(range(len(config.modality_dims)))]
    M = len(config.modality_dims)
    for s in subsets:
        if not s or any(not 0 <= m < M for m in s) or len(set(s)) != len(s):
            raise DimensionError(f"invalid modality subset {s} for {M} modalities")
    shared = None
    if config.gate_input == "encoded":
        shared = [Mlp([d, config.encoder_dim], activation=config.activation, out_activation=config.activation)
                  for d in config.modality_dims]
    experts = [_make_expert(i, s, config) for i, s in enumerate(subsets)]
    gate_in = sum(_input_dims(config))
    gate = GateNetwork(gate_in, config.gate_hidden, branches=len(experts), slots=1, activation=config.activation)
    model = ModalityMoe(config, experts, gate, shared)
    init_parameters(model, seed)
    return model


def build_two_expert_model(config: MoeConfig | None = None, seed: int = 0) -> ModalityMoe:
    """Cheap expert on the dominant modality plus an all-modality late-fusion expert.

    The gate is a 2-layer MLP over the concatenated inputs.
    """
    config = config or MoeConfig()
    if config.expert_subsets is not None and len(config.expert_subsets) != 2:
        raise DimensionError("two-expert model takes exactly two subsets")
    return build_subset_model(config, seed)


build_model = build_subset_model


def moe_cost_table(model: ModalityMoe) -> CostTable:
    return CostTable(
        expert_costs={i: count_madds(e) for i, e in enumerate(model.experts)},
        gate_cost=count_madds(model.gate),
        shared_cost=sum(count_madds(e) for e in model.shared_encoders),
    )


@dataclass
class MoeOutput:
    y: Tensor
    decision: GateDecision
    cost: np.ndarray = field(repr=False)


def route_rows(selected: np.ndarray, branches: int):
    """Row indices per branch plus the permutation restoring the input order."""
    groups = [np.flatnonzero(selected == i) for i in range(branches)]
    order = np.concatenate(groups)
    return groups, np.argsort(order, kind="stable")


def moe_forward(model: ModalityMoe, x: Sequence[Tensor], mode: str = "hard_inference", tau: float = 1.0,
                rng: np.random.Generator | None = None, decision: GateDecision | None = None) -> MoeOutput:
    """Forward pass returning output, decision and per-sample MAdds.

    Hard modes run only the selected expert on each sample (samples are grouped
    into per-expert sub-batches). Soft mode runs every expert and mixes the
    outputs with the soft gate. A supplied ``decision`` bypasses the gate, and
    the gate's cost is then not charged.
    """
    if len(x) != model.num_modalities:
        raise DimensionError(f"expected {model.num_modalities} modalities, got {len(x)}")
    n = x[0].shape[0]
    for xm, d in zip(x, model.config.modality_dims):
        if xm.ndim != 2 or xm.shape != (n, d):
            raise DimensionError(f"modality input shape {xm.shape} does not match ({n}, {d})")
    table = model.cost_table()
    feats = model.encode(x)
    cost = np.full(n, table.shared_cost, dtype=np.int64)
    if decision is None:
        decision = gate_forward(model.gate, feats, mode, tau, rng)
        cost += table.gate_cost
    elif decision.selected.shape != (n, 1):
        raise DimensionError(f"decision shape {decision.selected.shape} does not match batch {n}")
    mode = decision.mode
    B = model.num_experts

    if mode == "soft":
        soft = T.reshape(decision.soft, (n, B))
        y = None
        for i, e in enumerate(model.experts):
            yi = T.scale_rows(e([feats[m] for m in e.modality_subset]), T.column(soft, i))
            y = yi if y is None else T.add(y, yi)
        cost += sum(table.expert_costs.values()) + mixing_cost(B, y.shape[1])
        return MoeOutput(y, decision, cost)

    selected = decision.selected[:, 0]
    groups, restore = route_rows(selected, B)
    hard = T.reshape(decision.hard, (n, B)) if mode == "hard_st" else None
    parts = []
    for i, idx in enumerate(groups):
        if idx.size == 0:
            continue
        e = model.experts[i]
        yi = e([T.take_rows(feats[m], idx) for m in e.modality_subset])
        if hard is not None and hard.requires_grad:
            yi = route_through(yi, T.take_rows(T.column(hard, i), idx))
        parts.append(yi)
        cost[idx] += table.expert_costs[i]
    y = T.take_rows(parts[0] if len(parts) == 1 else T.concat(parts, axis=0), restore)
    return MoeOutput(y, decision, cost)


def static_decision(n: int, branch: int, branches: int) -> GateDecision:
    return forced_decision(np.full((n, 1), branch), branches)
