"""Declarative experiment configuration (single JSON document, ``schema: 1``)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..data import NoiseSpec, SyntheticSpec
from ..fusion import FusionConfig
from ..moe import MoeConfig
from ..trainer import TrainConfig

__all__ = ["NoiseSweep", "ExperimentConfig", "load_config", "config_from_dict"]

SCHEMA_VERSION = 1


@dataclass
class NoiseSweep:
    sigmas: list[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0, 8.0])
    target: str = "modality_2"
    prob: float = 1.0 / 3.0

    def spec(self, sigma: float) -> NoiseSpec:
        return NoiseSpec(self.target, sigma, self.prob)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a sweep.

    Run ``seed`` s trains on data generated with ``data.seed + s`` and
    initialises/trains models with seed ``s``; dynamic and static runs for the
    same ``s`` therefore see identical data.
    """

    architecture: str = "modality_moe"
    model: dict = field(default_factory=dict)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambda_values: list[float] = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.1, 1.0])
    noise_sweep: NoiseSweep | None = field(default_factory=NoiseSweep)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    # At lambda = 0 train and evaluate with soft gates (every branch runs).
    soft_at_zero_lambda: bool = True
    focus_lambda: float | None = None
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.schema}")
        if self.architecture not in ("modality_moe", "fusion_net"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not self.lambda_values or not self.seeds:
            raise ValueError("lambda_values and seeds must be non-empty")
        if any(lam < 0 for lam in self.lambda_values):
            raise ValueError("lambda values must be non-negative")
        self.model_config()

    def model_config(self) -> MoeConfig | FusionConfig:
        params = dict(self.model)
        params.setdefault("modality_dims", tuple(self.data.dims))
        if self.data.task == "multiclass":
            params.setdefault("n_outputs", self.data.n_classes)
        elif self.data.task == "regression" or self.train.loss == "binary_cross_entropy":
            params.setdefault("n_outputs", 1)
        if self.architecture == "fusion_net":
            return FusionConfig(**params)
        return MoeConfig(**params)

    def mid_lambda(self) -> float:
        """The lambda used for single-model protocols (routing, robustness, ablation)."""
        if self.focus_lambda is not None:
            return self.focus_lambda
        positive = sorted(v for v in self.lambda_values if v > 0)
        if not positive:
            return 0.0
        return positive[(len(positive) - 1) // 2]

    def data_spec(self, seed: int) -> SyntheticSpec:
        d = self.data.to_dict()
        d["seed"] = self.data.seed + seed
        return SyntheticSpec(**d)

    def train_config(self, lam: float, seed: int, **overrides) -> TrainConfig:
        d = self.train.to_dict()
        d.update(lam=lam, seed=seed)
        if lam == 0 and self.soft_at_zero_lambda:
            d.update(gate_training="annealed_soft", inference="soft")
        d.update(overrides)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "data" in d:
        d["data"] = SyntheticSpec(**d["data"])
    if "train" in d:
        d["train"] = TrainConfig(**d["train"])
    if d.get("noise_sweep") is not None:
        d["noise_sweep"] = NoiseSweep(**d["noise_sweep"])
    return ExperimentConfig(**d)


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
