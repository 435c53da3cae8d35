"""Train two small classifiers and compare attacks on them.

A scaled-down version of the label-smoothing experiment: natural training
versus natural training with label smoothing, then FGSM / PGD / MD under a
shared budget. Label smoothing inflates the PGD number; MD removes most of
the inflation.

Run:  python3 demos/04_train_and_attack.py   (about half a minute)
"""

import numpy as np

from margindecomp.attacks import AttackConfig, fgsm, md, pgd, total_budget
from margindecomp.models import TrainConfig, accuracy, init_mlp, make_synthetic, train

EPS = 0.05
SEED = 1

train_set = make_synthetic("gaussians", 10, 20, 2000, seed=SEED, split="train",
                           sigma=0.03, center_spread=0.06)
test_set = make_synthetic("gaussians", 10, 20, 500, seed=SEED, split="test",
                          sigma=0.03, center_spread=0.06)
x, y = test_set.inputs.data[:200], test_set.labels[:200]

pgd_cfg = AttackConfig(epsilon=EPS, alpha=EPS / 10, steps=100, restarts=4, seed=11)
md_cfg = AttackConfig(epsilon=EPS, steps=100, stage1_steps=20, restarts=4, seed=11)
print(f"budget: pgd {total_budget('pgd', pgd_cfg)} evals/sample, md {total_budget('md', md_cfg)}")

for mode in ("natural", "natural+ls"):
    model = init_mlp([20, 64, 64, 10], "relu", seed=SEED + 100)
    trained, history = train(model, train_set, TrainConfig(epochs=40, seed=SEED + 200, mode=mode, smoothing=0.5))
    clean = accuracy(trained, test_set.inputs, test_set.labels)
    r_fgsm = fgsm(trained, x, y, AttackConfig(epsilon=EPS, seed=11)).robust_accuracy
    r_pgd = pgd(trained, x, y, pgd_cfg).robust_accuracy
    r_md = md(trained, x, y, md_cfg).robust_accuracy
    print(f"\n{mode}: clean accuracy {clean:.3f} (loss {history[0]:.3f} -> {history[-1]:.3f})")
    print(f"  robust accuracy: fgsm {r_fgsm:.3f}   pgd {r_pgd:.3f}   md {r_md:.3f}")
    if mode == "natural+ls":
        print(f"  -> PGD overestimates robustness by {r_pgd - r_md:+.3f} on the smoothed model")
