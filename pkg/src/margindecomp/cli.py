"""Command-line driver: train models, run attacks, diagnostics, and studies.

Commands: ``train``, ``attack``, ``gir``, ``checklist``, ``study``. Every
command requires an explicit ``--seed`` and writes reproducible reports into
``--out`` (created when missing). Configuration and IO problems exit nonzero;
scientific findings (for example checklist verdicts) never change the exit
code.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from margindecomp import __version__
from margindecomp.attacks import (
    ATTACKS,
    AttackConfig,
    SpsaSettings,
    run_attack,
    run_ensemble,
    total_budget,
)
from margindecomp.diagnostics import gir_report, gir_trajectory
from margindecomp.losses import LossKind
from margindecomp.models import (
    Dataset,
    accuracy,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from margindecomp.reports import Report, write_report, write_series
from margindecomp.studies import (
    SUITE_MODES,
    DeskConfig,
    ablation_study,
    desk_data,
    ls_report,
    ls_study,
    populate_suite_cache,
    restarts_study,
    rows_report,
    spsa_md_study,
    sweep_study,
)

ENSEMBLE_DEFAULT = ("md", "md-mt", "pgd", "mi-fgsm")


class CliError(Exception):
    """Configuration or IO problem; maps to a nonzero exit code."""


def _attack_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps", type=float, default=0.05, help="L-inf budget")
    parser.add_argument("--alpha0", type=float, default=None,
                        help="step size (baselines) / initial step size (MD family)")
    parser.add_argument("--steps", type=int, default=100, help="total steps per restart")
    parser.add_argument("--stage1-steps", type=int, default=20, help="stage-1 steps of the MD schedule")
    parser.add_argument("--restarts", type=int, default=10, help="number of restarts")
    parser.add_argument("--targets", type=str, default=None,
                        help="comma-separated target classes for md-mt/mt (default: all non-true)")
    parser.add_argument("--switch-stages", action="store_true", help="run the margin stage first (ablation)")
    parser.add_argument("--disable-stage2", action="store_true", help="stretch stage 1 over every step (ablation)")
    parser.add_argument("--parity-origin", type=int, default=0, choices=(0, 1),
                        help="restart parity that attacks the non-true-class term")
    parser.add_argument("--spsa-batch", type=int, default=128, help="SPSA probe batch size")
    parser.add_argument("--spsa-delta", type=float, default=0.01, help="SPSA probe radius")


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, required=True, help="run seed (mandatory; no clock defaults)")
    parser.add_argument("--out", type=str, required=True, help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for per-sample fan-out")
    parser.add_argument("--data", type=str, default=None, help="dataset file (default: generate the desk task)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="margindecomp",
        description="Desk-scale adversarial robustness toolkit (gradient imbalance + margin decomposition)",
    )
    parser.add_argument("--version", action="version", version=f"margindecomp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model suite or a single mode")
    _common_flags(p_train)
    p_train.add_argument("--suite", choices=("ls-study",), default=None,
                         help="train the four-mode label-smoothing suite")
    p_train.add_argument("--mode", choices=SUITE_MODES, default=None, help="train a single mode")
    p_train.add_argument("--epochs", type=int, default=None, help="override the desk epoch count")

    p_attack = sub.add_parser("attack", help="run attacks against a checkpoint")
    _common_flags(p_attack)
    _attack_flags(p_attack)
    p_attack.add_argument("--model", type=str, required=True, help="model checkpoint")
    p_attack.add_argument("--attack", type=str, default="pgd",
                          help="comma-separated attack names (or 'ensemble')")

    p_gir = sub.add_parser("gir", help="gradient imbalance statistics")
    _common_flags(p_gir)
    _attack_flags(p_gir)
    p_gir.add_argument("--model", type=str, required=True, action="append",
                       help="model checkpoint (repeatable)")
    p_gir.add_argument("--trajectory", action="store_true",
                       help="also emit per-step imbalance along an attack")
    p_gir.add_argument("--attack", type=str, default="md", choices=("pgd", "md"),
                       help="attack whose trajectory to trace")
    p_gir.add_argument("--trajectory-samples", type=int, default=5)

    p_check = sub.add_parser("checklist", help="five-rule obfuscated-gradients test")
    _common_flags(p_check)
    _attack_flags(p_check)
    p_check.add_argument("--model", type=str, required=True, help="defended model checkpoint")
    p_check.add_argument("--substitute", type=str, required=True, help="substitute model checkpoint")
    p_check.add_argument("--random-samples", type=int, default=10_000,
                         help="ball samples per PGD-failure image")

    p_study = sub.add_parser("study", help="run one of the paper-style studies")
    p_study.add_argument("name", choices=("ls", "restarts", "spsa-md", "ablation", "sweep"))
    _common_flags(p_study)
    p_study.add_argument("--seeds", type=int, default=5, help="number of training seeds (from --seed upward)")
    p_study.add_argument("--eval-size", type=int, default=None, help="evaluation subset size")
    p_study.add_argument("--epochs", type=int, default=None, help="override the desk epoch count")
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(f"cannot create output directory {out}: {err}") from err
    if not out.is_dir():
        raise CliError(f"output path {out} is not a directory")
    return out


def _desk_config(args) -> DeskConfig:
    cfg = DeskConfig(workers=args.workers)
    if getattr(args, "epochs", None):
        cfg = replace(cfg, epochs=args.epochs)
    if getattr(args, "eval_size", None):
        cfg = replace(cfg, eval_size=args.eval_size)
    return cfg


def _load_eval_data(args, cfg: DeskConfig) -> Dataset:
    if args.data:
        path = Path(args.data)
        if not path.exists():
            raise CliError(f"dataset file {path} does not exist")
        return load_dataset(path)
    _, test_set = desk_data(cfg, args.seed)
    return test_set


def _attack_config(args, lock_loss: LossKind | None = None) -> AttackConfig:
    return AttackConfig(
        epsilon=args.eps,
        alpha=args.alpha0,
        steps=args.steps,
        stage1_steps=args.stage1_steps,
        restarts=args.restarts,
        seed=args.seed,
        loss=lock_loss if lock_loss is not None else LossKind.ce(),
        switch_stages=args.switch_stages,
        disable_stage2=args.disable_stage2,
        parity_origin=args.parity_origin,
        spsa=SpsaSettings(batch=args.spsa_batch, delta=args.spsa_delta, iterations=args.steps),
    )


def _base_meta(args, command: str) -> dict[str, str]:
    meta = {"tool": f"margindecomp {__version__}", "command": command, "seed": str(args.seed)}
    # the worker count cannot change results, so it is not part of the
    # reproduction config and is kept out of the header
    for key in ("eps", "alpha0", "steps", "stage1_steps", "restarts",
                "parity_origin", "spsa_batch", "spsa_delta", "random_samples"):
        if hasattr(args, key):
            meta[key.replace("_", "-")] = str(getattr(args, key))
    return meta


def _require_alpha_default(args, name: str) -> None:
    if args.alpha0 is None and name in ("pgd", "cw", "mt", "mi-fgsm", "spsa", "spsa-md"):
        args.alpha0 = args.eps / 10.0 if name in ("pgd", "cw", "mt") else args.eps / 4.0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _desk_config(args)
    modes = list(SUITE_MODES) if args.suite else [args.mode or "natural"]
    train_set, test_set = desk_data(cfg, args.seed)
    cache: dict = {}
    populate_suite_cache(cfg, [args.seed], modes, cache, workers=args.workers)
    report = Report(meta=_base_meta(args, "train"))
    rows = []
    for mode in modes:
        model = cache[(args.seed, mode)]
        name = mode.replace("+", "_")
        path = out / f"{name}_seed{args.seed}.ckpt"
        save_checkpoint(model, path, metadata={"mode": mode, "seed": str(args.seed), "epochs": str(cfg.epochs)})
        rows.append([
            mode,
            str(path.name),
            accuracy(model, train_set.inputs, train_set.labels),
            accuracy(model, test_set.inputs, test_set.labels),
        ])
        print(f"trained {mode}: checkpoint {path}")
    report.add_table("models", ["mode", "checkpoint", "train_accuracy", "test_accuracy"], rows)
    data_path = out / f"testset_seed{args.seed}.csv"
    save_dataset(test_set, data_path)
    write_report(report, out / f"train_seed{args.seed}.report")
    print(f"report: {out / f'train_seed{args.seed}.report'}")
    return 0


def _parse_targets(args):
    if args.targets is None:
        return None
    try:
        return [int(t) for t in args.targets.split(",") if t != ""]
    except ValueError as err:
        raise CliError(f"bad --targets value {args.targets!r}: {err}") from err


def cmd_attack(args) -> int:
    out = _out_dir(args)
    cfg = _desk_config(args)
    model_path = Path(args.model)
    if not model_path.exists():
        raise CliError(f"model checkpoint {model_path} does not exist")
    model = load_checkpoint(model_path)
    data = _load_eval_data(args, cfg)
    x, y = data.inputs.data, data.labels
    names = [n.strip() for n in args.attack.split(",") if n.strip()]
    rows = []
    for name in names:
        if name == "ensemble":
            members = []
            for member in ENSEMBLE_DEFAULT:
                _require_alpha_default(args, member)
                lock = LossKind.margin() if member == "cw" else None
                members.append((member, _attack_config(args, lock_loss=lock)))
            outcome = run_ensemble(model, x, y, members, workers=args.workers)
            budget = sum(total_budget(m, c) for m, c in members)
        elif name in ATTACKS:
            _require_alpha_default(args, name)
            acfg = _attack_config(args)
            kwargs = {}
            if name in ("md-mt", "mt"):
                kwargs["targets"] = _parse_targets(args)
            outcome = run_attack(name, model, x, y, acfg, workers=args.workers, **kwargs)
            budget = total_budget(name, acfg)
        else:
            raise CliError(f"unknown attack {name!r}; valid: {sorted(ATTACKS)} or 'ensemble'")
        rows.append([name, outcome.robust_accuracy, float(np.mean(outcome.success)), budget])
        print(f"attack {name}: robust accuracy {outcome.robust_accuracy:.4f} (budget {budget})")
    rows.sort(key=lambda r: -r[1])
    report = Report(meta=_base_meta(args, "attack") | {"model": model_path.name})
    report.add_table("robust_accuracy", ["attack", "robust_accuracy", "success_rate", "budget"], rows)
    write_report(report, out / "attack.report")
    print(f"report: {out / 'attack.report'}")
    return 0


def cmd_gir(args) -> int:
    out = _out_dir(args)
    cfg = _desk_config(args)
    data = _load_eval_data(args, cfg)
    report = Report(meta=_base_meta(args, "gir"))
    rows = []
    for model_arg in args.model:
        path = Path(model_arg)
        if not path.exists():
            raise CliError(f"model checkpoint {path} does not exist")
        model = load_checkpoint(path)
        rep = gir_report(model, data.inputs, data.labels)
        rows.append([path.name, rep.mean_gir, rep.median_gir, rep.fraction_degenerate, len(rep.entries)])
        print(f"gir {path.name}: mean {rep.mean_gir:.4f} median {rep.median_gir:.4f} "
              f"degenerate {rep.fraction_degenerate:.4f}")
    report.add_table("gir", ["model", "mean_gir", "median_gir", "fraction_degenerate", "samples"], rows)
    if args.trajectory:
        model = load_checkpoint(Path(args.model[0]))
        acfg = _attack_config(args)
        if args.attack == "pgd":
            _require_alpha_default(args, "pgd")
            acfg = _attack_config(args)
        series_rows = []
        n = min(args.trajectory_samples, len(data))
        for i in range(n):
            traj = gir_trajectory(model, data.inputs.data[i], int(data.labels[i]), args.attack, acfg)
            series_rows.extend([i, step, value] for step, value in enumerate(traj))
        write_series(out / "gir_trajectory.csv", ["sample", "step", "gir"], series_rows)
        print(f"trajectory: {out / 'gir_trajectory.csv'}")
    write_report(report, out / "gir.report")
    print(f"report: {out / 'gir.report'}")
    return 0


def cmd_checklist(args) -> int:
    out = _out_dir(args)
    cfg = _desk_config(args)
    for path in (args.model, args.substitute):
        if not Path(path).exists():
            raise CliError(f"checkpoint {path} does not exist")
    model = load_checkpoint(args.model)
    substitute = load_checkpoint(args.substitute)
    data = _load_eval_data(args, cfg)
    _require_alpha_default(args, "pgd")
    from margindecomp.diagnostics import checklist

    spsa_cfg = replace(
        _attack_config(args, lock_loss=LossKind.margin()),
        alpha=args.eps / 4.0,
        spsa=SpsaSettings(batch=args.spsa_batch, delta=args.spsa_delta, iterations=50),
    )
    rep = checklist(
        model, substitute, data.inputs.data, data.labels, _attack_config(args),
        random_samples=args.random_samples, spsa_cfg=spsa_cfg,
    )
    report = Report(meta=_base_meta(args, "checklist") | {
        "model": Path(args.model).name, "substitute": Path(args.substitute).name,
        "random-samples": str(args.random_samples),
    })
    rows = []
    for name, rule in rep.rules.items():
        measured = ";".join(f"{k}={v:.4f}" for k, v in rule.measured.items())
        rows.append([name, "sign" if rule.fired else "clear", measured])
        print(f"rule {name}: {'OBFUSCATION SIGN' if rule.fired else 'no sign'} ({measured})")
    report.add_table("rules", ["rule", "verdict", "measured"], rows)
    report.add_table("conclusion", ["obfuscation_signs"], [[str(rep.obfuscation_signs).lower()]])
    write_report(report, out / "checklist.report")
    print(f"report: {out / 'checklist.report'}")
    return 0


def cmd_study(args) -> int:
    out = _out_dir(args)
    cfg = _desk_config(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    cache: dict = {}
    if args.name == "ls":
        populate_suite_cache(cfg, seeds, SUITE_MODES, cache, workers=args.workers)
        rows = ls_study(cfg, seeds, cache)
        report = ls_report(cfg, seeds, rows)
        write_report(report, out / "study_ls.report")
        agg_path = out / "gir_by_mode.csv"
        from margindecomp.studies import ls_aggregate

        agg = ls_aggregate(rows)
        write_series(agg_path, ["mode", "mean_gir"], [[m, v["mean_gir"]] for m, v in agg.items()])
        print(f"report: {out / 'study_ls.report'}")
    elif args.name == "restarts":
        populate_suite_cache(cfg, seeds, ["natural+ls"], cache, workers=args.workers)
        rows = restarts_study(cfg, seeds, cache=cache)
        write_report(rows_report(cfg, seeds, "study restarts", "restarts", rows), out / "study_restarts.report")
        print(f"report: {out / 'study_restarts.report'}")
    elif args.name == "spsa-md":
        populate_suite_cache(cfg, seeds, ["natural+ls"], cache, workers=args.workers)
        rows = spsa_md_study(cfg, seeds, cache=cache)
        write_report(rows_report(cfg, seeds, "study spsa-md", "spsa_md", rows), out / "study_spsa_md.report")
        print(f"report: {out / 'study_spsa_md.report'}")
    elif args.name == "ablation":
        populate_suite_cache(cfg, seeds, ["sat+ls"], cache, workers=args.workers)
        rows = ablation_study(cfg, seeds, cache=cache)
        write_report(rows_report(cfg, seeds, "study ablation", "ablation", rows), out / "study_ablation.report")
        print(f"report: {out / 'study_ablation.report'}")
    else:  # sweep
        populate_suite_cache(cfg, seeds[:1], ["sat+ls"], cache, workers=args.workers)
        stage1_rows, alpha_rows = sweep_study(cfg, seeds[0], cache=cache)
        report = rows_report(cfg, seeds[:1], "study sweep", "stage1_sweep", stage1_rows)
        report.add_table(
            "alpha0_sweep",
            ["alpha0_over_eps", "robust_accuracy"],
            [[r["alpha0_over_eps"], r["robust_accuracy"]] for r in alpha_rows],
        )
        write_report(report, out / "study_sweep.report")
        write_series(out / "sweep_stage1.csv", ["stage1_steps", "robust_accuracy"],
                     [[r["stage1_steps"], r["robust_accuracy"]] for r in stage1_rows])
        write_series(out / "sweep_alpha0.csv", ["alpha0_over_eps", "robust_accuracy"],
                     [[r["alpha0_over_eps"], r["robust_accuracy"]] for r in alpha_rows])
        print(f"report: {out / 'study_sweep.report'}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "gir": cmd_gir,
    "checklist": cmd_checklist,
    "study": cmd_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
