"""
The training objective, piece by piece
======================================

Three exact identities pin down the loss implementation, and all three
are cheap to verify by hand:

* the classification loss of an all-zero logit vector is ln 2,
* the branch-consistency (discriminability) term vanishes when both
  branches hold identical weights and see identical views, and
* the diversity term is 1 for identical attribute features, 0 for
  orthogonal ones, and the total combines the pieces with fixed
  weights: total = global + alpha * dis + beta * div.
"""

import numpy as np

from attrvit.losses import (
    LossBreakdown,
    LossConfig,
    combine_losses,
    diversity_loss,
    global_loss,
    normalized_mse,
)
from attrvit.tensor import Tensor

# ln 2 shows up because sigmoid(0) = 1/2 on both label branches.
logits = Tensor(np.zeros((4, 3)))
labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1], [0, 0, 0]], dtype=float)
print("global_loss at zero logits:", float(global_loss(logits, labels).data), "vs ln 2 =", np.log(2.0))

# The consistency distance is 2 - 2 cos(a, b): zero iff aligned.
a = Tensor(np.array([1.0, 2.0, 3.0]))
print("normalized_mse(a, a) =", float(normalized_mse(a, a).data))
print("normalized_mse(a, -a) =", float(normalized_mse(a, Tensor(-a.data)).data), "(max is 4)")

# Diversity is the mean off-diagonal pairwise cosine of the flattened
# per-attribute [S, H, W, dim] feature stacks.
stack = Tensor(np.ones((2, 1, 2, 3)))
print("diversity of two identical attributes:", float(diversity_loss(stack).data))
orth = Tensor(
    np.array([[1.0, 0, 0, 1, 0, 0], [0, 1.0, 0, 0, 1, 0]]).reshape(2, 1, 2, 3)
)
print("diversity of two orthogonal attributes:", float(diversity_loss(orth).data))

# And the bookkeeping identity that the trainer logs every step.
cfg = LossConfig(alpha=0.5, beta=1.0)
total, breakdown = combine_losses(Tensor(0.7), Tensor(0.2), Tensor(-0.4), cfg)
assert isinstance(breakdown, LossBreakdown)
print("total:", float(total.data), "= 0.7 + 0.5*0.2 + 1.0*(-0.4)")
