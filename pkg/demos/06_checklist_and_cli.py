"""The five-rule gradient-masking checklist, plus the CLI entry points.

The point of the checklist is what it does NOT find: a label-smoothed model
sails through all five obfuscated-gradient tests while PGD still
overestimates its robustness. Imbalanced gradients are a different animal.

Run:  python3 demos/06_checklist_and_cli.py   (about a minute)
"""

from margindecomp.studies import DeskConfig, checklist_study

cfg = DeskConfig(eval_size=120, workers=2)
report = checklist_study(cfg, seed=1, mode="natural+ls", random_samples=2000)
for name, rule in report.rules.items():
    measured = ", ".join(f"{k}={v:.3f}" for k, v in rule.measured.items())
    print(f"{name:16s} {'SIGN' if rule.fired else 'clear'}  ({measured})")
print(f"\nobfuscation signs present: {report.obfuscation_signs}")

print("""
The same machinery drives the command line, e.g.:

  margindecomp train --suite ls-study --seed 1 --out runs/
  margindecomp attack --model runs/natural_ls_seed1.ckpt --attack fgsm,pgd,md \\
      --eps 0.05 --restarts 10 --seed 1 --out runs/
  margindecomp gir --model runs/natural_seed1.ckpt --model runs/natural_ls_seed1.ckpt \\
      --trajectory --seed 1 --out runs/
  margindecomp checklist --model runs/natural_ls_seed1.ckpt \\
      --substitute runs/natural_seed1.ckpt --seed 1 --out runs/
  margindecomp study ls --seed 1 --seeds 5 --out runs/
""")
