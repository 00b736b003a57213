"""A tour of the autodiff core and the two gate relaxations.

Run: python demos/01_gates_and_gradients.py
"""

import numpy as np

from dynfuse import tensor as T
from dynfuse.gating import AnnealSchedule, anneal_tau, sample_gumbel, soft_gate, straight_through
from dynfuse.tensor import Tensor

rng = np.random.default_rng(0)

# Tensors record the ops that produced them; backward() walks that tape in reverse.
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))
loss = T.mean(T.activation("tanh", T.matmul(x, w)))
loss.backward()
print("loss", round(loss.item(), 4))
print("dloss/dw\n", w.grad.round(4))

# Every matmul reports its multiply-adds to an active counter.
with T.count_madds() as counter:
    T.matmul(x, w)
print("MAdds for a (4x3)@(3x2) matmul:", counter.total)

# Gumbel-softmax: the same logits, cooled from tau=1 to tau=0.01.
logits = Tensor(np.array([[1.0, 0.5]]))
noise = sample_gumbel((1, 2), rng)
for tau in (1.0, 0.3, 0.01):
    print(f"tau={tau:<5} soft gate {soft_gate(logits, noise, tau).data.round(4)}")

# The straight-through gate is one-hot going forward but differentiates like the soft gate.
lg = Tensor(np.array([[0.2, -0.1]]), requires_grad=True)
g = soft_gate(lg, noise, 0.5)
hard = straight_through(g)
print("forward:", hard.data, " soft:", g.data.round(3))
T.sum(T.mul(hard, Tensor(np.array([[1.0, -1.0]])))).backward()
print("gradient reaching the logits:", lg.grad.round(4))

# Stage-2 temperature schedule: geometric from 1 to 1e-4 over 500 epochs.
sched = AnnealSchedule(1.0, 1e-4, 500, "exponential")
print("tau at epochs 0/250/500:", [anneal_tau(sched, e) for e in (0, 250, 500)])
