"""The 1-D landscape where the margin gradient points the wrong way.

The fixture's only misclassified region sits near the -2 end of the
landscape, but at the clean point the -z1 term dominates the margin
gradient and drags a margin-only attack to +2, where the sample is still
classified correctly. Attacking the z2 term alone walks straight into the
misclassified region.

Run:  python3 demos/03_toy_landscape.py
"""

import numpy as np

from margindecomp.attacks import AttackConfig, md
from margindecomp.diagnostics import toy_fixture
from margindecomp.tensor import Tensor

fix = toy_fixture()
print(f"clean point t={fix.model.to_landscape(fix.x0):+.1f}, label {fix.label}, budget eps(t)=2")
print(f"grad z2   at clean point: {fix.grad_z2_at_x0:+.3f}")
print(f"grad -z1  at clean point: {fix.grad_negz1_at_x0:+.3f}  <- dominates, opposite sign")

# A quick look at the landscape itself.
ts = np.linspace(-2, 2, 9)
logits = fix.model.logits(Tensor(fix.model.to_box(ts).reshape(-1, 1))).data
print("\n   t     z1      z2     margin")
for t, (z1, z2) in zip(ts, logits):
    mark = "  <- misclassified" if z2 > z1 else ""
    print(f"{t:+5.1f}  {z1:+.3f}  {z2:+.3f}  {z2 - z1:+.3f}{mark}")

x0 = np.asarray([[fix.x0]])
margin_only = AttackConfig(epsilon=fix.epsilon, steps=40, stage1_steps=1, restarts=1, seed=0)
out_margin = md(fix.model, x0, [fix.label], margin_only)
print(f"\nmargin-only ascent ends at t={fix.model.to_landscape(out_margin.x_adv[0,0]):+.2f}, "
      f"success={bool(out_margin.success[0])}")

two_stage = AttackConfig(epsilon=fix.epsilon, steps=40, stage1_steps=20, restarts=2, seed=0)
out_md = md(fix.model, x0, [fix.label], two_stage)
print(f"two-stage MD        ends at t={fix.model.to_landscape(out_md.x_adv[0,0]):+.2f}, "
      f"success={bool(out_md.success[0])}")
