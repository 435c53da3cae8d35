"""The margin loss, its two terms, and the two-stage loss schedule.

Run:  python3 demos/02_margin_decomposition.py
"""

import numpy as np

from margindecomp.losses import (
    LossKind,
    StageSchedule,
    eval_loss,
    grad_loss,
    md_select,
    zmax_index,
)
from margindecomp.models import init_mlp
from margindecomp.tensor import Tensor

logits = [2.0, 5.0, 1.0]
y = 0
print("logits:", logits, "true class:", y)
print("z_max index:", zmax_index(logits, y))
print("margin loss  :", eval_loss(LossKind.margin(), logits, y), "(positive = misclassified)")
print("z_max term   :", eval_loss(LossKind.term_zmax(), logits, y))
print("-z_y term    :", eval_loss(LossKind.term_negzy(), logits, y))
print("cross entropy:", round(eval_loss(LossKind.ce(), logits, y), 4))

# The margin gradient is exactly the sum of its two term gradients.
model = init_mlp([6, 16, 4], "tanh", seed=1)
x = Tensor(np.full(6, 0.42))
g_margin = grad_loss(LossKind.margin(), model, x, 1).data
g_sum = grad_loss(LossKind.term_zmax(), model, x, 1).data + grad_loss(LossKind.term_negzy(), model, x, 1).data
print("\nadditivity max error:", float(np.abs(g_margin - g_sum).max()))

# Stage schedule: restarts alternate between the two terms during stage 1,
# then every restart finishes on the full margin.
schedule = StageSchedule(total_steps=10, stage1_steps=4)
print("\nloss schedule (rows = restarts, cols = steps):")
for restart in (1, 2):
    row = [md_select(schedule, k, restart).tag for k in range(1, 11)]
    print(f"  r={restart}:", " ".join(f"{t:>10s}" for t in row))
