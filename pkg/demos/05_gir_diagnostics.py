"""Measure gradient imbalance and watch an attack rebalance it.

Run:  python3 demos/05_gir_diagnostics.py   (about half a minute)
"""

import numpy as np

from margindecomp.attacks import AttackConfig
from margindecomp.diagnostics import dominated_split, gir_from_gradients, gir_report, gir_trajectory
from margindecomp.losses import LossKind
from margindecomp.models import TrainConfig, init_mlp, make_synthetic, train

# The ratio itself, on hand-made gradients: dims split by which term
# dominates, L1 masses, ratio of the heavier side to the lighter one.
g_zmax = [1.0, -2.0, 0.2]
g_negzy = [-0.5, 1.0, -0.4]
s1, s2 = dominated_split(g_zmax, g_negzy)
entry = gir_from_gradients(g_zmax, g_negzy)
print(f"dominated dims: s1={s1.tolist()} s2={s2.tolist()}")
print(f"r1={entry.r1} r2={entry.r2} GIR={entry.gir}")

# Model-level: label smoothing raises the mean ratio.
train_set = make_synthetic("gaussians", 10, 20, 2000, seed=3, split="train",
                           sigma=0.03, center_spread=0.06)
test_set = make_synthetic("gaussians", 10, 20, 500, seed=3, split="test",
                          sigma=0.03, center_spread=0.06)
for mode in ("natural", "natural+ls"):
    model = init_mlp([20, 64, 64, 10], "relu", seed=103)
    trained, _ = train(model, train_set, TrainConfig(epochs=40, seed=203, mode=mode, smoothing=0.5))
    report = gir_report(trained, test_set.inputs, test_set.labels)
    print(f"\n{mode}: mean GIR {report.mean_gir:.2f}, median {report.median_gir:.2f}, "
          f"degenerate fraction {report.fraction_degenerate:.3f}")
    if mode == "natural+ls":
        # Attacking the z_max term alone steadily drives the ratio toward 1.
        cfg = AttackConfig(epsilon=0.05, alpha=0.005, steps=20, restarts=1, seed=5,
                           loss=LossKind.term_zmax())
        traj = gir_trajectory(trained, test_set.inputs.data[0], int(test_set.labels[0]), "pgd", cfg)
        shown = [f"{v:.2f}" for v in traj[:8]]
        print(f"  GIR along a z_max-term attack: {' '.join(shown)} ... final {traj[-1]:.2f}")
