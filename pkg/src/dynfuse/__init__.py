"""Dynamic multimodal fusion on a small numpy autodiff core.

A gate network chooses, per sample, how much multimodal computation to run:
either which modality expert handles the input or which fusion operation each
cell of a fusion network applies. Training trades task loss against a MAdds
penalty.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost import CostTable, ResourceLossConfig, count_madds
from .data import Dataset, DatasetFormatError, NoiseSpec, SyntheticSpec, generate, inject_noise, load_dataset, save_dataset
from .fusion import FusionConfig, FusionNetwork, build_fusion_network, fusion_forward
from .gating import AnnealSchedule, GateDecision, GateNetwork, gate_forward
from .metrics import MetricsRecord
from .moe import ModalityMoe, MoeConfig, build_subset_model, build_two_expert_model, moe_forward
from .tensor import DimensionError, Tensor
from .trainer import TrainConfig, evaluate, predict, train, train_static

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "CostTable",
    "ResourceLossConfig",
    "count_madds",
    "Dataset",
    "DatasetFormatError",
    "NoiseSpec",
    "SyntheticSpec",
    "generate",
    "inject_noise",
    "load_dataset",
    "save_dataset",
    "FusionConfig",
    "FusionNetwork",
    "build_fusion_network",
    "fusion_forward",
    "AnnealSchedule",
    "GateDecision",
    "GateNetwork",
    "gate_forward",
    "MetricsRecord",
    "ModalityMoe",
    "MoeConfig",
    "build_subset_model",
    "build_two_expert_model",
    "moe_forward",
    "DimensionError",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "predict",
    "train",
    "train_static",
]
