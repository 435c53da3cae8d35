"""Desk-scale reproductions of the controlled studies.

Everything here is driven by one frozen recipe (:class:`DeskConfig`): a
10-class, 20-dimensional gaussian-cluster task whose geometry was calibrated
so that a naturally trained MLP is fully attackable at eps = 0.05 while
label-smoothed training visibly inflates PGD robustness. Each study trains
its own models from the study seed, so results are reproducible from a
single integer.

Seed derivation: dataset <- seed, init <- seed + 100, training <- seed + 200,
attacks <- seed + 300. Models are cached per (seed, mode) in an optional
``cache`` dict so that a test session can reuse one trained suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from margindecomp.attacks import (
    AttackConfig,
    SpsaSettings,
    run_attack,
    total_budget,
)
from margindecomp.diagnostics import ChecklistReport, checklist, gir_report
from margindecomp.losses import LossKind
from margindecomp.models import (
    Dataset,
    InnerAttack,
    MlpModel,
    TrainConfig,
    accuracy,
    init_mlp,
    make_synthetic,
    train,
)
from margindecomp.reports import Report

__all__ = [
    "DeskConfig",
    "SUITE_MODES",
    "desk_data",
    "train_suite_model",
    "train_suite",
    "baseline_pgd_config",
    "md_config",
    "ls_study",
    "restarts_study",
    "spsa_md_study",
    "ablation_study",
    "sweep_study",
    "checklist_study",
    "sign_test_pvalue",
]

SUITE_MODES = ("natural", "natural+ls", "sat", "sat+ls")


@dataclass(frozen=True)
class DeskConfig:
    """Frozen desk-scale recipe; every field is overridable per run."""

    classes: int = 10
    dim: int = 20
    train_size: int = 2000
    test_size: int = 500
    sigma: float = 0.03
    center_spread: float = 0.06
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    epochs: int = 60
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    smoothing: float = 0.5
    inner: InnerAttack = field(default_factory=InnerAttack)
    epsilon: float = 0.05
    eval_size: int = 300
    attack_steps: int = 100
    stage1_steps: int = 20
    attack_restarts: int = 10
    spsa_batch: int = 128
    spsa_iterations: int = 50
    spsa_delta: float = 0.01
    checklist_spsa_batch: int = 32
    ablation_steps: int = 10
    ablation_stage1_steps: int = 5
    ablation_restarts: int = 2
    workers: int = 1

    @property
    def layer_dims(self) -> list[int]:
        return [self.dim, *self.hidden, self.classes]


def desk_data(cfg: DeskConfig, seed: int) -> tuple[Dataset, Dataset]:
    common = dict(sigma=cfg.sigma, center_spread=cfg.center_spread)
    train_set = make_synthetic("gaussians", cfg.classes, cfg.dim, cfg.train_size, seed, split="train", **common)
    test_set = make_synthetic("gaussians", cfg.classes, cfg.dim, cfg.test_size, seed, split="test", **common)
    return train_set, test_set


def train_suite_model(cfg: DeskConfig, seed: int, mode: str, cache: dict | None = None) -> MlpModel:
    key = (seed, mode)
    if cache is not None and key in cache:
        return cache[key]
    train_set, _ = desk_data(cfg, seed)
    model = init_mlp(cfg.layer_dims, cfg.activation, seed=seed + 100)
    trained, _ = train(
        model,
        train_set,
        TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            seed=seed + 200,
            mode=mode,
            smoothing=cfg.smoothing,
            inner=cfg.inner,
        ),
    )
    if cache is not None:
        cache[key] = trained
    return trained


def train_suite(cfg: DeskConfig, seed: int, modes: Sequence[str] = SUITE_MODES, cache: dict | None = None):
    return {mode: train_suite_model(cfg, seed, mode, cache) for mode in modes}


def _train_job(payload):
    cfg, seed, mode = payload
    model = (
        _substitute_model(cfg, seed)
        if mode == "substitute"
        else train_suite_model(cfg, seed, mode)
    )
    return seed, mode, model.parameter_arrays()


def populate_suite_cache(
    cfg: DeskConfig,
    seeds: Sequence[int],
    modes: Sequence[str] = SUITE_MODES,
    cache: dict | None = None,
    workers: int = 1,
) -> dict:
    """Train every (seed, mode) pair, optionally across worker processes.

    Trainings are independent and individually deterministic, so the worker
    count cannot change any parameter bit.
    """
    import multiprocessing

    cache = cache if cache is not None else {}
    jobs = [(cfg, seed, mode) for seed in seeds for mode in modes if (seed, mode) not in cache]
    if not jobs:
        return cache
    if workers <= 1 or len(jobs) == 1:
        results = [_train_job(j) for j in jobs]
    else:
        with multiprocessing.get_context("fork").Pool(processes=workers) as pool:
            results = pool.map(_train_job, jobs)
    for seed, mode, params in results:
        cache[(seed, mode)] = MlpModel.from_arrays(cfg.layer_dims, cfg.activation, params)
    return cache


def _eval_set(cfg: DeskConfig, seed: int, size: int | None = None):
    _, test_set = desk_data(cfg, seed)
    n = min(size if size is not None else cfg.eval_size, len(test_set))
    return test_set.inputs.data[:n], test_set.labels[:n]


def baseline_pgd_config(cfg: DeskConfig, seed: int) -> AttackConfig:
    """The classic PGD reference: step eps/10, full budget, CE loss."""
    return AttackConfig(
        epsilon=cfg.epsilon,
        alpha=cfg.epsilon / 10.0,
        steps=cfg.attack_steps,
        restarts=cfg.attack_restarts,
        seed=seed + 300,
    )


def md_config(cfg: DeskConfig, seed: int, **overrides) -> AttackConfig:
    base = AttackConfig(
        epsilon=cfg.epsilon,
        steps=cfg.attack_steps,
        stage1_steps=cfg.stage1_steps,
        restarts=cfg.attack_restarts,
        seed=seed + 300,
    )
    return replace(base, **overrides) if overrides else base


def _spsa_config(cfg: DeskConfig, seed: int) -> AttackConfig:
    return AttackConfig(
        epsilon=cfg.epsilon,
        alpha=cfg.epsilon / 4.0,
        steps=cfg.spsa_iterations,
        stage1_steps=max(1, min(cfg.stage1_steps, cfg.spsa_iterations // 5)),
        restarts=1,
        seed=seed + 300,
        loss=LossKind.margin(),
        spsa=SpsaSettings(batch=cfg.spsa_batch, delta=cfg.spsa_delta, iterations=cfg.spsa_iterations),
    )


# --- label smoothing study (robustness table + imbalance ratios) -------------


@dataclass(frozen=True)
class LsRow:
    seed: int
    mode: str
    clean_accuracy: float
    fgsm: float
    pgd: float
    md: float
    mean_gir: float
    median_gir: float
    fraction_degenerate: float


def ls_study(cfg: DeskConfig, seeds: Sequence[int], cache: dict | None = None) -> list[LsRow]:
    """Robust accuracy of FGSM/PGD/MD and imbalance ratios per training mode."""
    rows = []
    for seed in seeds:
        x, y = _eval_set(cfg, seed)
        _, test_set = desk_data(cfg, seed)
        for mode in SUITE_MODES:
            model = train_suite_model(cfg, seed, mode, cache)
            fgsm_out = run_attack(
                "fgsm", model, x, y, AttackConfig(epsilon=cfg.epsilon, seed=seed + 300), workers=cfg.workers
            )
            pgd_out = run_attack("pgd", model, x, y, baseline_pgd_config(cfg, seed), workers=cfg.workers)
            md_out = run_attack("md", model, x, y, md_config(cfg, seed), workers=cfg.workers)
            imbalance = gir_report(model, test_set.inputs, test_set.labels)
            rows.append(
                LsRow(
                    seed=seed,
                    mode=mode,
                    clean_accuracy=accuracy(model, test_set.inputs, test_set.labels),
                    fgsm=fgsm_out.robust_accuracy,
                    pgd=pgd_out.robust_accuracy,
                    md=md_out.robust_accuracy,
                    mean_gir=imbalance.mean_gir,
                    median_gir=imbalance.median_gir,
                    fraction_degenerate=imbalance.fraction_degenerate,
                )
            )
    return rows


def ls_aggregate(rows: Sequence[LsRow]) -> dict[str, dict[str, float]]:
    """Per-mode means over seeds of every LsRow measurement."""
    out: dict[str, dict[str, float]] = {}
    for mode in SUITE_MODES:
        chunk = [r for r in rows if r.mode == mode]
        if not chunk:
            continue
        out[mode] = {
            "clean_accuracy": float(np.mean([r.clean_accuracy for r in chunk])),
            "fgsm": float(np.mean([r.fgsm for r in chunk])),
            "pgd": float(np.mean([r.pgd for r in chunk])),
            "md": float(np.mean([r.md for r in chunk])),
            "mean_gir": float(np.mean([r.mean_gir for r in chunk])),
            "median_gir": float(np.mean([r.median_gir for r in chunk])),
            "fraction_degenerate": float(np.mean([r.fraction_degenerate for r in chunk])),
        }
    return out


def ls_report(cfg: DeskConfig, seeds: Sequence[int], rows: Sequence[LsRow]) -> Report:
    report = Report(meta=_meta(cfg, seeds, command="study ls"))
    report.add_table(
        "per_seed",
        ["seed", "mode", "clean_accuracy", "fgsm", "pgd", "md", "mean_gir", "median_gir", "fraction_degenerate"],
        [
            [r.seed, r.mode, r.clean_accuracy, r.fgsm, r.pgd, r.md, r.mean_gir, r.median_gir, r.fraction_degenerate]
            for r in rows
        ],
    )
    agg = ls_aggregate(rows)
    report.add_table(
        "aggregate",
        ["mode", "clean_accuracy", "fgsm", "pgd", "md", "mean_gir", "median_gir", "fraction_degenerate"],
        [
            [mode, v["clean_accuracy"], v["fgsm"], v["pgd"], v["md"], v["mean_gir"], v["median_gir"], v["fraction_degenerate"]]
            for mode, v in agg.items()
        ],
    )
    pgd_budget = total_budget("pgd", baseline_pgd_config(cfg, seeds[0]))
    md_budget = total_budget("md", md_config(cfg, seeds[0]))
    report.add_table("budget", ["attack", "evaluations_per_sample"],
                     [["fgsm", 1], ["pgd", pgd_budget], ["md", md_budget]])
    return report


# --- restart / momentum study -------------------------------------------------


def restarts_study(cfg: DeskConfig, seeds: Sequence[int], mode: str = "natural+ls", cache: dict | None = None):
    """Single-restart PGD vs many-restart PGD vs MI-FGSM vs MD.

    Budgets are deliberately unequal here (that is the finding: extra
    restarts do not buy what margin decomposition buys); the per-attack
    budget is part of the result rows.
    """
    attacks = {
        "pgd_single": ("pgd", lambda s: AttackConfig(
            epsilon=cfg.epsilon, alpha=cfg.epsilon / 4, steps=40, restarts=1, seed=s + 300)),
        "pgd_restarts": ("pgd", lambda s: baseline_pgd_config(cfg, s)),
        "mi_fgsm": ("mi-fgsm", lambda s: AttackConfig(
            epsilon=cfg.epsilon, alpha=cfg.epsilon / 4, steps=40, restarts=2, momentum=1.0, seed=s + 300)),
        "md": ("md", lambda s: md_config(cfg, s)),
    }
    rows = []
    for seed in seeds:
        x, y = _eval_set(cfg, seed)
        model = train_suite_model(cfg, seed, mode, cache)
        for label, (name, make) in attacks.items():
            acfg = make(seed)
            out = run_attack(name, model, x, y, acfg, workers=cfg.workers)
            rows.append({"seed": seed, "attack": label, "robust_accuracy": out.robust_accuracy,
                         "budget": total_budget(name, acfg)})
    return rows


# --- SPSA with and without the MD schedule ------------------------------------


def spsa_md_study(cfg: DeskConfig, seeds: Sequence[int], mode: str = "natural+ls", cache: dict | None = None):
    """SPSA vs SPSA+MD success rates at an identical query budget."""
    rows = []
    for seed in seeds:
        x, y = _eval_set(cfg, seed)
        model = train_suite_model(cfg, seed, mode, cache)
        acfg = _spsa_config(cfg, seed)
        plain = run_attack("spsa", model, x, y, acfg, workers=cfg.workers)
        staged = run_attack("spsa-md", model, x, y, acfg, workers=cfg.workers)
        rows.append({
            "seed": seed,
            "spsa": float(np.mean(plain.success)),
            "spsa_md": float(np.mean(staged.success)),
            "queries": 2 * acfg.spsa.batch * acfg.spsa.iterations,
        })
    return rows


# --- ablation: second stage and stage order ------------------------------------


def ablation_study(
    cfg: DeskConfig,
    seeds: Sequence[int],
    mode: str = "sat+ls",
    cache: dict | None = None,
    include_mt: bool = True,
):
    """MD (and MD-MT) success with/without stage 2 and with stages switched.

    The attacks run at a deliberately scarce step budget: at desk scale the
    default 100-step attacks saturate long before the budget runs out, which
    hides how the two stages divide the work. A short schedule keeps both
    stages binding, which is the regime the stage structure is about.
    """
    scarce = dict(steps=cfg.ablation_steps, stage1_steps=cfg.ablation_stage1_steps)
    rows = []
    for seed in seeds:
        x, y = _eval_set(cfg, seed, size=cfg.test_size)
        model = train_suite_model(cfg, seed, mode, cache)
        variants = {
            "md": md_config(cfg, seed, restarts=cfg.ablation_restarts, **scarce),
            "md_no_stage2": md_config(cfg, seed, restarts=cfg.ablation_restarts, disable_stage2=True, **scarce),
            "md_switched": md_config(cfg, seed, restarts=cfg.ablation_restarts, switch_stages=True, **scarce),
        }
        row = {"seed": seed}
        for label, acfg in variants.items():
            out = run_attack("md", model, x, y, acfg, workers=cfg.workers)
            row[label] = float(np.mean(out.success))
        if include_mt:
            mt_restarts = 2 * (cfg.classes - 1)
            for label, acfg in {
                "md_mt": md_config(cfg, seed, restarts=mt_restarts, **scarce),
                "md_mt_no_stage2": md_config(cfg, seed, restarts=mt_restarts, disable_stage2=True, **scarce),
                "md_mt_switched": md_config(cfg, seed, restarts=mt_restarts, switch_stages=True, **scarce),
            }.items():
                out = run_attack("md-mt", model, x, y, acfg, workers=cfg.workers)
                row[label] = float(np.mean(out.success))
        rows.append(row)
    return rows


def sign_test_pvalue(diffs: Sequence[float]) -> float:
    """One-sided exact sign test that positive differences dominate.

    Ties are discarded; the p-value is ``P[Binomial(n, 1/2) >= wins]``.
    With no informative differences the direction is unopposed (p = 0).
    """
    wins = sum(1 for d in diffs if d > 0)
    losses = sum(1 for d in diffs if d < 0)
    n = wins + losses
    if n == 0:
        return 0.0
    from math import comb

    return sum(comb(n, k) for k in range(wins, n + 1)) / 2.0**n


# --- parameter sweeps -----------------------------------------------------------


def sweep_study(cfg: DeskConfig, seed: int, mode: str = "sat+ls", cache: dict | None = None):
    """Robust accuracy over the stage-1 step grid and the initial-step grid."""
    x, y = _eval_set(cfg, seed)
    model = train_suite_model(cfg, seed, mode, cache)
    stage1_rows = []
    for k1 in range(5, 55, 5):
        out = run_attack("md", model, x, y, md_config(cfg, seed, stage1_steps=k1), workers=cfg.workers)
        stage1_rows.append({"stage1_steps": k1, "robust_accuracy": out.robust_accuracy})
    alpha_rows = []
    for mult in [0.25 * k for k in range(1, 11)]:
        acfg = md_config(cfg, seed, alpha=mult * cfg.epsilon)
        out = run_attack("md", model, x, y, acfg, workers=cfg.workers)
        alpha_rows.append({"alpha0_over_eps": mult, "robust_accuracy": out.robust_accuracy})
    return stage1_rows, alpha_rows


# --- obfuscated-gradients checklist ----------------------------------------------


def checklist_study(
    cfg: DeskConfig,
    seed: int,
    mode: str = "natural+ls",
    random_samples: int = 10_000,
    cache: dict | None = None,
) -> ChecklistReport:
    """Five-rule checklist of the given suite model.

    The substitute for the transfer rule is a naturally trained model on the
    same data with a different initialization/training stream.
    """
    x, y = _eval_set(cfg, seed)
    model = train_suite_model(cfg, seed, mode, cache)
    substitute = _substitute_model(cfg, seed, cache)
    # Probe batch scaled to the task dimension so the estimate noise sits in
    # the regime the rule is about (a gradient-free consistency check, not a
    # second white-box attack).
    spsa_cfg = replace(
        _spsa_config(cfg, seed),
        spsa=SpsaSettings(batch=cfg.checklist_spsa_batch, delta=cfg.spsa_delta, iterations=cfg.spsa_iterations),
    )
    return checklist(
        model, substitute, x, y, baseline_pgd_config(cfg, seed),
        random_samples=random_samples, spsa_cfg=spsa_cfg,
    )


def _substitute_model(cfg: DeskConfig, seed: int, cache: dict | None = None) -> MlpModel:
    key = (seed, "substitute")
    if cache is not None and key in cache:
        return cache[key]
    train_set, _ = desk_data(cfg, seed)
    model = init_mlp(cfg.layer_dims, cfg.activation, seed=seed + 1100)
    trained, _ = train(
        model,
        train_set,
        TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            seed=seed + 1200,
            mode="natural",
            smoothing=cfg.smoothing,
            inner=cfg.inner,
        ),
    )
    if cache is not None:
        cache[key] = trained
    return trained


def _meta(cfg: DeskConfig, seeds: Sequence[int], command: str) -> dict[str, str]:
    from margindecomp import __version__

    meta = {
        "tool": f"margindecomp {__version__}",
        "command": command,
        "seed": str(seeds[0] if len(seeds) == 1 else ",".join(str(s) for s in seeds)),
    }
    for key in (
        "classes", "dim", "train_size", "test_size", "sigma", "center_spread",
        "epochs", "lr", "momentum", "weight_decay", "batch_size", "smoothing",
        "epsilon", "eval_size", "attack_steps", "stage1_steps", "attack_restarts",
        "spsa_batch", "spsa_iterations", "spsa_delta",
    ):
        meta[key] = str(getattr(cfg, key))
    meta["hidden"] = "x".join(str(h) for h in cfg.hidden)
    meta["activation"] = cfg.activation
    return meta


def rows_report(cfg: DeskConfig, seeds: Sequence[int], command: str, name: str, rows: list[dict]) -> Report:
    report = Report(meta=_meta(cfg, seeds, command))
    if rows:
        columns = list(rows[0].keys())
        report.add_table(name, columns, [[r[c] for c in columns] for r in rows])
    return report
