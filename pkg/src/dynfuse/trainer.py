"""Two-stage training, optimisers and evaluation.

Stage 1 trains every branch without the gate (all experts jointly for the
modality-level model; one uniformly random path per batch for the
fusion-level model). Stage 2 trains network and gate end to end on task loss
plus the resource loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cost import ResourceLossConfig, resource_loss_fusion, resource_loss_modality, total_loss
from .data import HARD, Dataset
from .fusion import FusionNetwork, fusion_forward, random_decision
from .gating import AnnealSchedule, GateDecision, anneal_tau, forced_decision
from .losses import task_loss
from .metrics import (
    DEGENERATE_ENTROPY,
    MetricsRecord,
    accuracy,
    f1_scores,
    selection_entropy,
    selection_ratios,
)
from .moe import ModalityMoe, moe_forward
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "optimizer_step",
    "forward",
    "stage1_pretrain",
    "stage2_finetune",
    "train",
    "train_static",
    "predict",
    "Predictions",
    "evaluate",
]

log = logging.getLogger(__name__)

Model = ModalityMoe | FusionNetwork


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "adaptive_moments"
    lam: float = 0.0
    normalization: str = "cheapest_expert"
    gate_training: str = "straight_through"
    anneal: AnnealSchedule | None = None
    seed: int = 0
    ablation: str = "full"
    loss: str = "cross_entropy"
    inference: str = "hard"

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealSchedule(**self.anneal)
        if self.anneal is None:
            self.anneal = AnnealSchedule(1.0, 1.0, max(self.stage2_epochs, 1), "constant")
        if self.ablation not in ("full", "one_stage", "frozen_backbone"):
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.ablation == "one_stage":
            self.stage1_epochs = 0
        if self.optimizer not in ("sgd_momentum", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gate_training not in ("straight_through", "annealed_soft"):
            raise ValueError(f"unknown gate training {self.gate_training!r}")
        if self.inference not in ("hard", "soft"):
            raise ValueError(f"unknown inference mode {self.inference!r}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be non-negative and batch_size positive")

    @property
    def resource(self) -> ResourceLossConfig:
        return ResourceLossConfig(self.lam, self.normalization)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anneal"] = asdict(self.anneal)
        return d


# ---------------------------------------------------------------------------
# Optimisers

@dataclass
class OptimizerState:
    step: int = 0
    slots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(params: Sequence[tuple[str, Tensor]], state: OptimizerState, cfg: TrainConfig) -> None:
    """Update ``params`` in place from their ``.grad`` (missing grads count as zero).

    sgd_momentum: ``v <- m v + g``; ``p <- p - lr (v + wd p)``.
    adaptive_moments: bias-corrected first/second moments with decoupled weight decay.
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        slot = state.slots.setdefault(id(p), {})
        if cfg.optimizer == "sgd_momentum":
            v = slot.get("v")
            v = g.copy() if v is None else cfg.momentum * v + g
            slot["v"] = v
            p.data -= lr * (v + wd * p.data)
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            m = slot.get("m", np.zeros_like(p.data))
            v = slot.get("v", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            slot["m"], slot["v"] = m, v
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.data)


# ---------------------------------------------------------------------------
# Forward dispatch

def _inputs(batch: Dataset) -> list[Tensor]:
    return [Tensor(f) for f in batch.features]


def forward(model: Model, x: Sequence[Tensor], mode: str = "hard_inference", tau: float = 1.0,
            rng: np.random.Generator | None = None, decision: GateDecision | None = None):
    """Dispatch to the modality- or fusion-level forward; returns (y, decision, cost)."""
    if isinstance(model, FusionNetwork):
        out = fusion_forward(model, x[0], x[1], mode, tau, rng, decision)
    else:
        out = moe_forward(model, x, mode, tau, rng, decision)
    return out.y, out.decision, out.cost


def _resource_loss(model: Model, decision: GateDecision, cfg: TrainConfig) -> Tensor:
    table = model.cost_table()
    if isinstance(model, FusionNetwork):
        return resource_loss_fusion(decision, table, cfg.resource)
    return resource_loss_modality(decision, table, cfg.resource)


def _named(model: Model, which: str) -> list[tuple[str, Tensor]]:
    if which == "gate":
        ids = {id(p) for p in model.gate_parameters()}
    elif which == "backbone":
        ids = {id(p) for p in model.backbone_parameters()}
    else:
        ids = {id(p) for p in model.parameters()}
    return [(n, p) for n, p in model.named_parameters() if id(p) in ids]


def _step(loss: Tensor, params: list[tuple[str, Tensor]], state: OptimizerState, cfg: TrainConfig) -> None:
    for _, p in params:
        p.grad = None
    loss.backward()
    optimizer_step(params, state, cfg)


LogFn = Callable[[dict], None]


def stage1_pretrain(model: Model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                    log_fn: LogFn | None = None) -> Model:
    """Train every branch with the gate left untouched."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = _named(model, "backbone")
    state = OptimizerState()
    fusion = isinstance(model, FusionNetwork)
    for epoch in range(cfg.stage1_epochs):
        total, batches = 0.0, 0
        for batch in data.batches(cfg.batch_size, rng):
            x = _inputs(batch)
            if fusion:
                path = random_decision(model.num_cells, model.num_ops, rng)
                decision = forced_decision(np.tile(path, (len(batch), 1)), model.num_ops, mode="hard_inference")
                y, _, _ = forward(model, x, decision=decision)
                loss = task_loss(cfg.loss, y, batch.labels)
            else:
                loss = None
                for i in range(model.num_experts):
                    li = task_loss(cfg.loss, model.expert_forward(i, x), batch.labels)
                    loss = li if loss is None else T.add(loss, li)
            _step(loss, params, state, cfg)
            total += loss.item()
            batches += 1
        if log_fn:
            log_fn({"stage": 1, "epoch": epoch, "task_loss": total / batches})
    return model


def stage2_finetune(model: Model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                    log_fn: LogFn | None = None) -> Model:
    """End-to-end training of network and gate on task + resource loss."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = _named(model, "gate" if cfg.ablation == "frozen_backbone" else "all")
    state = OptimizerState()
    mode = "hard_st" if cfg.gate_training == "straight_through" else "soft"
    schedule = cfg.anneal
    for epoch in range(cfg.stage2_epochs):
        tau = anneal_tau(schedule, min(epoch, schedule.total_epochs))
        sums = np.zeros(2)
        batches = 0
        counts = None
        for batch in data.batches(cfg.batch_size, rng):
            y, decision, _ = forward(model, _inputs(batch), mode, tau, rng)
            lt = task_loss(cfg.loss, y, batch.labels)
            lr_ = _resource_loss(model, decision, cfg)
            _step(total_loss(lt, lr_), params, state, cfg)
            sums += (lt.item(), lr_.item())
            batches += 1
            c = selection_ratios(decision.selected, decision.branches) * len(batch)
            counts = c if counts is None else counts + c
        if log_fn:
            ratios = counts / len(data)
            log_fn({"stage": 2, "epoch": epoch, "tau": tau, "task_loss": sums[0] / batches,
                    "resource_loss": sums[1] / batches, "selection_ratio": ratios.tolist()})
    return model


def train(model: Model, data: Dataset, cfg: TrainConfig, log_fn: LogFn | None = None) -> Model:
    """Run the stages selected by ``cfg.ablation``. All randomness derives from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.stage1_epochs > 0:
        stage1_pretrain(model, data, cfg, rng, log_fn)
    return stage2_finetune(model, data, cfg, rng, log_fn)


def _static_decision(model: Model, n: int, branch: int) -> GateDecision:
    slots = model.num_cells if isinstance(model, FusionNetwork) else 1
    B = model.num_ops if isinstance(model, FusionNetwork) else model.num_experts
    return forced_decision(np.full((n, slots), branch), B)


def train_static(model: Model, data: Dataset, cfg: TrainConfig, branch: int,
                 log_fn: LogFn | None = None) -> Model:
    """Train a fixed-path baseline: the same branch for every sample, no gate."""
    rng = np.random.default_rng(cfg.seed)
    params = _named(model, "backbone")
    state = OptimizerState()
    for epoch in range(cfg.stage1_epochs + cfg.stage2_epochs):
        total, batches = 0.0, 0
        for batch in data.batches(cfg.batch_size, rng):
            y, _, _ = forward(model, _inputs(batch), decision=_static_decision(model, len(batch), branch))
            loss = task_loss(cfg.loss, y, batch.labels)
            _step(loss, params, state, cfg)
            total += loss.item()
            batches += 1
        if log_fn:
            log_fn({"stage": "static", "branch": branch, "epoch": epoch, "task_loss": total / batches})
    return model


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class Predictions:
    outputs: np.ndarray
    selected: np.ndarray
    cost: np.ndarray
    branches: int


def predict(model: Model, data: Dataset, inference: str = "hard", static_branch: int | None = None,
            batch_size: int = 500) -> Predictions:
    """Noise-free inference. ``static_branch`` forces every sample down one path."""
    mode = "hard_inference" if inference == "hard" else "soft"
    outs, sels, costs = [], [], []
    for start in range(0, len(data), batch_size):
        batch = data.subset(np.arange(start, min(start + batch_size, len(data))))
        decision = None if static_branch is None else _static_decision(model, len(batch), static_branch)
        y, dec, cost = forward(model, _inputs(batch), mode, 1.0, None, decision)
        outs.append(y.data)
        sels.append(dec.selected)
        costs.append(cost)
    B = model.num_ops if isinstance(model, FusionNetwork) else model.num_experts
    return Predictions(np.concatenate(outs), np.concatenate(sels), np.concatenate(costs), B)


def _point_predictions(outputs: np.ndarray, loss: str) -> np.ndarray:
    if loss == "cross_entropy":
        return np.argmax(outputs, axis=1)
    if loss == "binary_cross_entropy":
        return (outputs[:, 0] > 0).astype(np.int64)
    return outputs[:, 0]


def evaluate(model: Model, data: Dataset, cfg: TrainConfig | None = None, *, inference: str | None = None,
             static_branch: int | None = None, reference_cost: float | None = None,
             kind: str = "dynamic", predictions: Predictions | None = None) -> MetricsRecord:
    """Task metrics, mean per-sample MAdds and gate statistics on ``data``.

    ``reference_cost`` is the per-sample MAdds of the static network the
    reduction is measured against.
    """
    cfg = cfg or TrainConfig()
    inference = inference or cfg.inference
    p = predictions or predict(model, data, inference, static_branch)
    rec = MetricsRecord(kind=kind, architecture=model.kind, lam=cfg.lam, seed=cfg.seed, ablation=cfg.ablation)
    point = _point_predictions(p.outputs, cfg.loss)
    if data.is_classification:
        rec.accuracy = accuracy(point, data.labels)
        rec.f1_micro, rec.f1_macro = f1_scores(point, data.labels, data.n_classes)
    else:
        rec.mae = float(np.mean(np.abs(point - data.labels)))
        rec.accuracy = accuracy(point >= 0, data.labels >= 0)
    rec.mean_madds_per_sample = float(np.mean(p.cost))
    if reference_cost:
        rec.madds_reduction_vs_static = float(1.0 - rec.mean_madds_per_sample / reference_cost)
    ratios = selection_ratios(p.selected, p.branches)
    rec.selection_ratio = {f"s{j}_b{i}": float(ratios[j, i]) for j in range(ratios.shape[0])
                           for i in range(ratios.shape[1])}
    if static_branch is None:
        ent = selection_entropy(ratios)
        rec.gate_entropy = float(ent.min())
        rec.degenerate_gate = bool(np.any(ent < DEGENERATE_ENTROPY))
    cheap = model.cheapest_branch()
    is_cheap = (p.selected == cheap).mean(axis=1)
    hard = data.difficulty == HARD
    if (~hard).any():
        rec.cheap_ratio_easy = float(is_cheap[~hard].mean())
    if hard.any():
        rec.cheap_ratio_hard = float(is_cheap[hard].mean())
    return rec
