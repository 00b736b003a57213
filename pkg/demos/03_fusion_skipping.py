"""Fusion-level gating and dead-branch skipping.

Each fusion cell either keeps stream 1 as is (identity) or fuses in stream 2.
Once every later cell picks identity, the remaining stream-2 blocks have no
consumer and are not run at all.

Run: python demos/03_fusion_skipping.py
"""

import numpy as np

from dynfuse import tensor as T
from dynfuse.fusion import FusionConfig, build_fusion_network, decision_to_architecture, fusion_forward
from dynfuse.gating import forced_decision
from dynfuse.tensor import Tensor

net = build_fusion_network(FusionConfig(ops=("identity", "add", "se_fuse")), seed=0)
rng = np.random.default_rng(0)
x1, x2 = Tensor(rng.normal(size=(1, 32))), Tensor(rng.normal(size=(1, 32)))

print("per-cell op costs:\n", net.cost_table().op_matrix())
for path in ([0, 0, 0, 0], [1, 0, 0, 0], [0, 2, 0, 0], [1, 1, 1, 2]):
    plan = decision_to_architecture(path, net.num_cells, net.identity_mask())
    d = forced_decision(np.array([path]), net.num_ops)
    with T.count_madds() as c:
        out = fusion_forward(net, x1, x2, decision=d)
    full = fusion_forward(net, x1, x2, decision=d, skip=False)
    same = out.y.data.tobytes() == full.y.data.tobytes()
    print(f"ops {path}: stream-2 blocks run {plan.execute_block2}  MAdds {int(out.cost[0]):6d} "
          f"(counted {c.total}, no-skip {int(full.cost[0])}, outputs identical: {same})")

# With the global gate in charge, each sample gets its own path.
out = fusion_forward(net, Tensor(rng.normal(size=(5, 32))), Tensor(rng.normal(size=(5, 32))))
for i, (path, cost) in enumerate(zip(out.decision.selected, out.cost)):
    print(f"sample {i}: path {path.tolist()}  MAdds {cost}")
