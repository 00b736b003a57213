"""Train a two-expert modality-level model and look at who goes where.

Expert 0 reads modality 1 only and is cheap; expert 1 fuses both modalities.
Hard samples hide their label from modality 1, so a good gate should send them
to expert 1 and let easy samples take the cheap path.

Run: python demos/02_modality_routing.py
"""

import numpy as np

from dynfuse.data import HARD, SyntheticSpec, generate
from dynfuse.harness.runner import reference_cost
from dynfuse.moe import build_two_expert_model
from dynfuse.trainer import TrainConfig, evaluate, predict, train

train_set, test_set = generate(SyntheticSpec(seed=0))
model = build_two_expert_model(seed=0)
table = model.cost_table()
print("expert MAdds:", dict(table.expert_costs), " gate:", table.gate_cost)

cfg = TrainConfig(lam=0.01, seed=0)
train(model, train_set, cfg, log_fn=lambda d: d["stage"] == 2 and print(
    f"  stage 2 epoch {d['epoch']}: task {d['task_loss']:.3f}  resource {d['resource_loss']:.3f}"
    f"  cheap share {d['selection_ratio'][0][0]:.2f}"))

rec = evaluate(model, test_set, cfg, reference_cost=reference_cost(model))
print(f"accuracy {rec.accuracy:.4f}, mean MAdds {rec.mean_madds_per_sample:.0f} "
      f"({rec.madds_reduction_vs_static:.1%} below always running expert 1)")

p = predict(model, test_set)
hard = test_set.difficulty == HARD
for name, mask in (("easy", ~hard), ("hard", hard)):
    share = np.mean(p.selected[mask, 0] == 0)
    print(f"{name:>4} samples: {mask.sum():4d}, sent to the cheap expert {share:.1%}")
