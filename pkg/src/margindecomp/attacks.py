"""Sign-gradient attack procedures and the best-of ensemble runner.

All iterative attacks share one engine: per restart, initialize at
``x + Uniform(-eps, eps)``, take ``steps`` signed-gradient steps projected
onto the eps-ball (no box clipping between steps), and keep the best
candidate seen. Candidates are compared *after* box clipping, first by
success (misclassification) and then by the attack's tracking loss, so a
successful candidate is never displaced by an unsuccessful one. This makes
best-of-restarts monotone: adding restarts can only improve the attack.

Determinism: the noise/probe stream of each (sample, restart) pair is seeded
by ``(config seed, global sample index, restart counter)``, so results do not
depend on how samples are batched across tiles or worker processes.

The two-stage margin-decomposition attacks (``md``, ``md_mt``) follow the
schedule in :mod:`margindecomp.losses`: stage 1 alternates the decomposed
margin terms across restarts with a large cosine-annealed step size starting
at ``alpha0 = 2 * eps``; stage 2 re-anneals and attacks the full margin.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from margindecomp.losses import (
    LossKind,
    StageSchedule,
    loss_sum_on_tape,
    loss_values,
    margin_values,
    md_select,
    mdmt_select,
)
from margindecomp.tensor import GradTape, Tensor, backward

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "SpsaSettings",
    "cosine_alpha",
    "project",
    "final_clip",
    "fgsm",
    "pgd",
    "cw",
    "multitargeted_pgd",
    "mi_fgsm",
    "md",
    "md_mt",
    "spsa",
    "spsa_md",
    "ensemble",
    "run_attack",
    "run_ensemble",
    "total_budget",
    "ATTACKS",
]


@dataclass(frozen=True)
class SpsaSettings:
    """Gradient-estimation settings for the SPSA attacks."""

    batch: int = 128
    delta: float = 0.01
    iterations: int = 50

    def __post_init__(self) -> None:
        if self.batch < 1 or self.iterations < 1:
            raise ValueError(f"spsa batch and iterations must be positive: {self}")
        if self.delta <= 0:
            raise ValueError(f"spsa perturbation delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class AttackConfig:
    """One attack run.

    ``alpha`` is the fixed step size for the baselines and the *initial*
    step size for the MD family (None there means ``2 * epsilon``).
    ``epsilon = 0`` is allowed and yields the degenerate empty-ball attack.
    """

    epsilon: float
    alpha: float | None = None
    steps: int = 100
    stage1_steps: int = 20
    restarts: int = 1
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind.ce)
    switch_stages: bool = False
    disable_stage2: bool = False
    parity_origin: int = 0
    momentum: float = 1.0
    track_stage_loss: bool = False
    spsa: SpsaSettings = field(default_factory=SpsaSettings)

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 0 or self.restarts < 1 or self.stage1_steps < 1:
            raise ValueError("need steps >= 0, restarts >= 1, stage1_steps >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.parity_origin not in (0, 1):
            raise ValueError(f"parity_origin must be 0 or 1, got {self.parity_origin}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.switch_stages and self.disable_stage2:
            raise ValueError("switch_stages and disable_stage2 are mutually exclusive")


@dataclass
class AttackOutcome:
    """Per-sample adversarial examples plus the aggregate robust accuracy.

    ``best_loss`` is the tracking loss of the returned example (the margin
    loss for the MD family, the configured loss for the baselines); success
    means the final, box-clipped example is misclassified.
    """

    x_adv: np.ndarray
    success: np.ndarray
    best_loss: np.ndarray
    steps_used: np.ndarray
    robust_accuracy: float
    gir_trace: np.ndarray | None = None


def cosine_alpha(k: int, lo: int, hi: int, eps: float) -> float:
    """Cosine-annealed step size ``eps * (1 + cos(pi * (k - lo) / (hi - lo)))``.

    Stage 1 of the MD schedule is ``lo=1, hi=1+K'`` (fraction ``(k-1)/K'``)
    and stage 2 is ``lo=K', hi=K`` (fraction ``(k-K')/(K-K')``), both
    starting at ``2 * eps``.
    """
    if hi < lo:
        raise ValueError(f"empty schedule segment [{lo}, {hi}]")
    if not lo <= k <= hi:
        raise ValueError(f"step {k} outside schedule segment [{lo}, {hi}]")
    frac = 0.0 if hi == lo else (k - lo) / (hi - lo)
    return eps * (1.0 + math.cos(math.pi * frac))


def project(x_cand: np.ndarray, x_orig: np.ndarray, eps: float) -> np.ndarray:
    """Coordinatewise clamp of ``x_cand`` into the eps-ball around ``x_orig``."""
    return np.minimum(np.maximum(x_cand, x_orig - eps), x_orig + eps)


def final_clip(x_adv: np.ndarray) -> np.ndarray:
    """Coordinatewise clamp onto the [0, 1] box."""
    return np.clip(x_adv, 0.0, 1.0)


def _as_batch(x, y):
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x_arr.ndim == 1:
        x_arr = x_arr.reshape(1, -1)
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x_arr.shape[0] != y_arr.size:
        raise ValueError(f"inputs {x_arr.shape} and labels {y_arr.shape} do not align")
    return np.ascontiguousarray(x_arr), y_arr


def _indices(sample_indices, n: int) -> np.ndarray:
    if sample_indices is None:
        return np.arange(n, dtype=np.int64)
    idx = np.asarray(sample_indices, dtype=np.int64).reshape(-1)
    if idx.size != n:
        raise ValueError("sample_indices must match the batch size")
    return idx


def _restart_noise(x, eps, seed, indices, run_index):
    noise = np.empty_like(x)
    for row, si in enumerate(indices):
        rng = np.random.default_rng([int(seed), int(si), int(run_index)])
        noise[row] = rng.uniform(-eps, eps, x.shape[1])
    return noise


def _batch_grad(model, x_arr, y, kind, targets):
    tape = GradTape()
    xt = tape.watch(Tensor(x_arr))
    logits = model.logits(xt, tape=tape)
    total = loss_sum_on_tape(kind, tape, logits, y, targets=targets)
    return backward(tape, total)[xt.uid].data


class _BestTracker:
    """Keeps the best box-clipped candidate per sample.

    Default ordering is lexicographic (success, tracking loss): success is
    decided by the margin of the clipped candidate, so a successful example
    is never displaced and best-of-restarts is exactly monotone. With
    ``success_first=False`` candidates are compared by the tracking loss
    alone (the literal update rule, used by the stage-loss ablation).
    """

    def __init__(self, model, y, success_first: bool = True):
        self._model = model
        self._y = y
        self._success_first = success_first
        n = y.size
        self.x_adv = np.zeros((n, 1))
        self.success = np.zeros(n, dtype=bool)
        self.tracked = np.full(n, -np.inf)
        self._started = False

    def offer(self, candidate, track_kind, track_targets):
        clipped = final_clip(candidate)
        logits = self._model.logits(Tensor(clipped)).data
        margins = margin_values(logits, self._y)
        if track_kind.tag == "margin":
            tracked = margins
        else:
            tracked = loss_values(track_kind, logits, self._y, targets=track_targets)
        succ = margins > 0.0
        if not self._started:
            self.x_adv = clipped.copy()
            self.success = succ
            self.tracked = tracked
            self._started = True
            return
        if self._success_first:
            better = (succ & ~self.success) | ((succ == self.success) & (tracked > self.tracked))
        else:
            better = tracked > self.tracked
        self.x_adv[better] = clipped[better]
        self.success[better] = succ[better]
        self.tracked[better] = tracked[better]


@dataclass(frozen=True)
class _RestartPlan:
    run_index: int           # seeds the (sample, restart) RNG stream
    kinds: tuple[LossKind, ...]
    alphas: tuple[float, ...]
    track: LossKind = field(default_factory=LossKind.margin)
    targets: np.ndarray | None = None
    use_momentum: bool = False


def _run_plans(model, x, y, cfg, plans, *, include_clean, include_init,
               sample_indices=None, iterate_hook=None):
    """Shared driver for every white-box signed-gradient attack."""
    x, y = _as_batch(x, y)
    indices = _indices(sample_indices, y.size)
    best = _BestTracker(model, y, success_first=not cfg.track_stage_loss)
    if include_clean:
        best.offer(x, LossKind.margin(), None)

    for plan_no, plan in enumerate(plans):
        x_cur = x + _restart_noise(x, cfg.epsilon, cfg.seed, indices, plan.run_index)
        track_targets = plan.targets if plan.track.targeted else None
        if include_init:
            best.offer(x_cur, plan.track, track_targets)
        if iterate_hook is not None and plan_no == 0:
            iterate_hook(0, x_cur)
        velocity = np.zeros_like(x)
        for k, (kind, alpha) in enumerate(zip(plan.kinds, plan.alphas), start=1):
            g = _batch_grad(model, x_cur, y, kind, plan.targets if kind.targeted else None)
            if plan.use_momentum:
                l1 = np.abs(g).sum(axis=1, keepdims=True)
                velocity *= cfg.momentum
                nz = l1[:, 0] > 0.0
                velocity[nz] += g[nz] / l1[nz]
                direction = np.sign(velocity)
            else:
                direction = np.sign(g)
            x_cur = project(x_cur + alpha * direction, x, cfg.epsilon)
            if cfg.track_stage_loss:
                best.offer(x_cur, kind, plan.targets if kind.targeted else None)
            else:
                best.offer(x_cur, plan.track, track_targets)
            if iterate_hook is not None and plan_no == 0:
                iterate_hook(k, x_cur)

    used = sum(len(p.kinds) for p in plans)
    return AttackOutcome(
        x_adv=best.x_adv,
        success=best.success,
        best_loss=best.tracked,
        steps_used=np.full(y.size, used, dtype=np.int64),
        robust_accuracy=float(np.mean(~best.success)),
    )


def _require_alpha(cfg: AttackConfig, attack: str) -> float:
    if cfg.alpha is None:
        raise ValueError(f"{attack} needs an explicit step size (cfg.alpha)")
    return cfg.alpha


def fgsm(model, x, y, cfg: AttackConfig, *, sample_indices=None) -> AttackOutcome:
    """One signed-gradient step of size epsilon; no restarts, no tracking."""
    x, y = _as_batch(x, y)
    g = _batch_grad(model, x, y, cfg.loss, None)
    x_adv = final_clip(x + cfg.epsilon * np.sign(g))
    margins = margin_values(model.logits(Tensor(x_adv)).data, y)
    success = margins > 0.0
    return AttackOutcome(
        x_adv=x_adv,
        success=success,
        best_loss=margins,
        steps_used=np.ones(y.size, dtype=np.int64),
        robust_accuracy=float(np.mean(~success)),
    )


def pgd(model, x, y, cfg: AttackConfig, *, sample_indices=None, iterate_hook=None) -> AttackOutcome:
    """Fixed-step PGD with uniform-noise restarts, tracked by ``cfg.loss``."""
    alpha = _require_alpha(cfg, "pgd")
    plans = [
        _RestartPlan(run_index=r, kinds=(cfg.loss,) * cfg.steps, alphas=(alpha,) * cfg.steps, track=cfg.loss)
        for r in range(1, cfg.restarts + 1)
    ]
    return _run_plans(
        model, x, y, cfg, plans,
        include_clean=False, include_init=True,
        sample_indices=sample_indices, iterate_hook=iterate_hook,
    )


def cw(model, x, y, cfg: AttackConfig, *, sample_indices=None) -> AttackOutcome:
    """The L-infinity CW baseline: PGD on the margin loss."""
    return pgd(model, x, y, replace(cfg, loss=LossKind.margin()), sample_indices=sample_indices)


def _target_matrix(y: np.ndarray, num_classes: int, targets) -> np.ndarray:
    """Per-sample target lists, one column per target slot."""
    if targets is None:
        cols = num_classes - 1
        out = np.empty((y.size, cols), dtype=np.int64)
        for i, yi in enumerate(y):
            out[i] = [c for c in range(num_classes) if c != yi]
        return out
    explicit = sorted(int(t) for t in targets)
    if not explicit:
        raise ValueError("target set must be non-empty")
    if any(not 0 <= t < num_classes for t in explicit):
        raise ValueError(f"targets {explicit} outside [0, {num_classes})")
    clash = np.isin(y, explicit)
    if clash.any():
        raise ValueError(f"target set {explicit} contains the true class of sample {int(np.argmax(clash))}")
    return np.tile(np.asarray(explicit, dtype=np.int64), (y.size, 1))


def multitargeted_pgd(model, x, y, cfg: AttackConfig, *, targets=None, sample_indices=None) -> AttackOutcome:
    """PGD on the targeted margin, cycling the target class across restarts."""
    alpha = _require_alpha(cfg, "multitargeted pgd")
    _, y_arr = _as_batch(x, y)
    tmat = _target_matrix(y_arr, model.num_classes, targets)
    plans = []
    for r in range(1, cfg.restarts + 1):
        t_col = tmat[:, (r - 1) % tmat.shape[1]]
        kind = LossKind.targeted_margin(int(t_col[0]))
        plans.append(
            _RestartPlan(
                run_index=r, kinds=(kind,) * cfg.steps, alphas=(alpha,) * cfg.steps,
                track=kind, targets=t_col,
            )
        )
    return _run_plans(
        model, x, y, cfg, plans,
        include_clean=False, include_init=True,
        sample_indices=sample_indices,
    )


def mi_fgsm(model, x, y, cfg: AttackConfig, *, sample_indices=None) -> AttackOutcome:
    """Momentum iterative FGSM: velocity accumulates L1-normalized gradients."""
    alpha = _require_alpha(cfg, "mi-fgsm")
    plans = [
        _RestartPlan(
            run_index=r, kinds=(cfg.loss,) * cfg.steps, alphas=(alpha,) * cfg.steps,
            track=cfg.loss, use_momentum=True,
        )
        for r in range(1, cfg.restarts + 1)
    ]
    return _run_plans(
        model, x, y, cfg, plans,
        include_clean=False, include_init=True,
        sample_indices=sample_indices,
    )


def _md_alphas(cfg: AttackConfig) -> tuple[float, ...]:
    alpha0 = cfg.alpha if cfg.alpha is not None else 2.0 * cfg.epsilon
    half = alpha0 / 2.0
    K, Kp = cfg.steps, cfg.stage1_steps
    if cfg.disable_stage2:
        return tuple(cosine_alpha(k, 1, 1 + K, half) for k in range(1, K + 1))
    return tuple(
        cosine_alpha(k, 1, 1 + Kp, half) if k < Kp else cosine_alpha(k, Kp, K, half)
        for k in range(1, K + 1)
    )


def _md_kinds(cfg: AttackConfig, schedule: StageSchedule, restart: int) -> tuple[LossKind, ...]:
    K, Kp = cfg.steps, cfg.stage1_steps
    if restart % 2 == cfg.parity_origin:
        term = LossKind.term_zmax()
    else:
        term = LossKind.term_negzy()
    if cfg.disable_stage2:
        return (term,) * K
    if cfg.switch_stages:
        return tuple(LossKind.margin() if k < Kp else term for k in range(1, K + 1))
    return tuple(md_select(schedule, k, restart) for k in range(1, K + 1))


def md(model, x, y, cfg: AttackConfig, *, sample_indices=None, iterate_hook=None) -> AttackOutcome:
    """Two-stage margin-decomposition attack.

    Restart r attacks one decomposed term for the first ``stage1_steps - 1``
    steps (z_max when ``r mod 2 == parity_origin``, else -z_y) and the full
    margin afterwards, with the cosine step schedule re-annealed per stage.
    ``disable_stage2`` stretches stage 1 over all steps; ``switch_stages``
    runs the margin stage first (both for the ablation study).
    """
    if not 1 <= cfg.stage1_steps <= cfg.steps:
        raise ValueError(f"need 1 <= stage1_steps <= steps, got {cfg.stage1_steps} / {cfg.steps}")
    schedule = StageSchedule(cfg.steps, cfg.stage1_steps, cfg.parity_origin)
    alphas = _md_alphas(cfg)
    plans = [
        _RestartPlan(run_index=r, kinds=_md_kinds(cfg, schedule, r), alphas=alphas)
        for r in range(1, cfg.restarts + 1)
    ]
    return _run_plans(
        model, x, y, cfg, plans,
        include_clean=True, include_init=False,
        sample_indices=sample_indices, iterate_hook=iterate_hook,
    )


def md_mt(model, x, y, cfg: AttackConfig, *, targets=None, sample_indices=None) -> AttackOutcome:
    """Multi-targeted MD: ``restarts // |targets|`` outer restarts, each
    running the MD schedule once per target class; the strongest example over
    all (restart, target) runs wins."""
    if not 1 <= cfg.stage1_steps <= cfg.steps:
        raise ValueError(f"need 1 <= stage1_steps <= steps, got {cfg.stage1_steps} / {cfg.steps}")
    _, y_arr = _as_batch(x, y)
    tmat = _target_matrix(y_arr, model.num_classes, targets)
    n_targets = tmat.shape[1]
    if cfg.restarts < n_targets:
        raise ValueError(
            f"restart budget {cfg.restarts} cannot cover {n_targets} targets; "
            "raise restarts or shrink the target set"
        )
    n_outer = cfg.restarts // n_targets
    schedule = StageSchedule(cfg.steps, cfg.stage1_steps, cfg.parity_origin)
    alphas = _md_alphas(cfg)
    K, Kp = cfg.steps, cfg.stage1_steps

    def targeted_kinds(outer: int, probe: int) -> tuple[LossKind, ...]:
        term = LossKind.term_zt(probe) if outer % 2 == cfg.parity_origin else LossKind.term_negzy()
        if cfg.disable_stage2:
            return (term,) * K
        if cfg.switch_stages:
            return tuple(LossKind.targeted_margin(probe) if k < Kp else term for k in range(1, K + 1))
        return tuple(mdmt_select(schedule, k, outer, probe) for k in range(1, K + 1))

    plans = []
    for outer in range(1, n_outer + 1):
        for ti in range(n_targets):
            t_col = tmat[:, ti]
            kinds = targeted_kinds(outer, int(t_col[0]))
            plans.append(
                _RestartPlan(
                    run_index=(outer - 1) * n_targets + ti + 1,
                    kinds=kinds,
                    alphas=alphas,
                    targets=t_col,
                )
            )
    return _run_plans(
        model, x, y, cfg, plans,
        include_clean=True, include_init=False,
        sample_indices=sample_indices,
    )


def _spsa_like(model, x, y, cfg: AttackConfig, kinds_for_restart, *, sample_indices=None) -> AttackOutcome:
    """SPSA core: Rademacher two-point gradient estimates, PGD-style updates."""
    x, y = _as_batch(x, y)
    alpha = _require_alpha(cfg, "spsa")
    settings = cfg.spsa
    indices = _indices(sample_indices, y.size)
    n, d = x.shape
    best = _BestTracker(model, y)

    for r in range(1, cfg.restarts + 1):
        rngs = [np.random.default_rng([int(cfg.seed), int(si), r]) for si in indices]
        noise = np.stack([rng.uniform(-cfg.epsilon, cfg.epsilon, d) for rng in rngs])
        x_cur = x + noise
        best.offer(x_cur, LossKind.margin(), None)
        kinds = kinds_for_restart(r)
        for kind in kinds:
            probes = np.stack([rng.integers(0, 2, size=(settings.batch, d)) for rng in rngs]) * 2.0 - 1.0
            plus = (x_cur[:, None, :] + settings.delta * probes).reshape(n * settings.batch, d)
            minus = (x_cur[:, None, :] - settings.delta * probes).reshape(n * settings.batch, d)
            y_rep = np.repeat(y, settings.batch)
            lp = loss_values(kind, model.logits(Tensor(plus)).data, y_rep)
            lm = loss_values(kind, model.logits(Tensor(minus)).data, y_rep)
            diff = ((lp - lm) / (2.0 * settings.delta)).reshape(n, settings.batch, 1)
            g_hat = np.mean(diff * probes, axis=1)
            x_cur = project(x_cur + alpha * np.sign(g_hat), x, cfg.epsilon)
            best.offer(x_cur, LossKind.margin(), None)

    used = cfg.restarts * settings.iterations
    return AttackOutcome(
        x_adv=best.x_adv,
        success=best.success,
        best_loss=best.tracked,
        steps_used=np.full(y.size, used, dtype=np.int64),
        robust_accuracy=float(np.mean(~best.success)),
    )


def spsa(model, x, y, cfg: AttackConfig, *, sample_indices=None) -> AttackOutcome:
    """Gradient-free attack with a fixed loss (``cfg.loss``)."""
    return _spsa_like(
        model, x, y, cfg,
        lambda r: (cfg.loss,) * cfg.spsa.iterations,
        sample_indices=sample_indices,
    )


def spsa_md(model, x, y, cfg: AttackConfig, *, sample_indices=None) -> AttackOutcome:
    """SPSA driven by the MD two-stage loss schedule instead of a fixed loss."""
    if not 1 <= cfg.stage1_steps <= cfg.spsa.iterations:
        raise ValueError(
            f"need 1 <= stage1_steps <= spsa iterations, got {cfg.stage1_steps} / {cfg.spsa.iterations}"
        )
    schedule = StageSchedule(cfg.spsa.iterations, cfg.stage1_steps, cfg.parity_origin)
    return _spsa_like(
        model, x, y, cfg,
        lambda r: tuple(md_select(schedule, k, r) for k in range(1, cfg.spsa.iterations + 1)),
        sample_indices=sample_indices,
    )


ATTACKS: dict[str, Callable] = {
    "fgsm": fgsm,
    "pgd": pgd,
    "cw": cw,
    "mt": multitargeted_pgd,
    "mi-fgsm": mi_fgsm,
    "md": md,
    "md-mt": md_mt,
    "spsa": spsa,
    "spsa-md": spsa_md,
}


def total_budget(name: str, cfg: AttackConfig) -> int:
    """Gradient (or estimate) evaluations per sample; the fairness currency."""
    if name == "fgsm":
        return 1
    if name in ("spsa", "spsa-md"):
        return cfg.restarts * cfg.spsa.iterations
    return cfg.restarts * cfg.steps


def _combine_member_outcomes(model, x, y, names, outcomes) -> AttackOutcome:
    x, y = _as_batch(x, y)
    chosen = x.copy()
    chosen_margin = np.full(y.size, -np.inf)
    chosen_success = np.zeros(y.size, dtype=bool)
    steps = np.zeros(y.size, dtype=np.int64)
    for out in outcomes:
        margins = margin_values(model.logits(Tensor(out.x_adv)).data, y)
        succ = margins > 0.0
        newly_successful = succ & ~chosen_success
        improved_failure = ~chosen_success & ~succ & (margins > chosen_margin)
        take = newly_successful | improved_failure
        chosen[take] = out.x_adv[take]
        chosen_margin[take] = margins[take]
        chosen_success |= succ
        steps += out.steps_used
    return AttackOutcome(
        x_adv=chosen,
        success=chosen_success,
        best_loss=chosen_margin,
        steps_used=steps,
        robust_accuracy=float(np.mean(~chosen_success)),
    )


def ensemble(model, x, y, members: Sequence[tuple[str, AttackConfig]], *, sample_indices=None) -> AttackOutcome:
    """Best-of over attack members: per sample, the first succeeding member's
    example wins; if none succeeds, the failure with the highest margin."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    names, outcomes = [], []
    for name, cfg in members:
        if name not in ATTACKS or name == "ensemble":
            raise ValueError(f"unknown ensemble member {name!r}; valid: {sorted(ATTACKS)}")
        names.append(name)
        outcomes.append(ATTACKS[name](model, x, y, cfg, sample_indices=sample_indices))
    return _combine_member_outcomes(model, x, y, names, outcomes)


# --- tiled / parallel execution ----------------------------------------------

_TILE = 128


def _run_tile(payload):
    from margindecomp.models import MlpModel

    (dims, activation, params, name, cfg, x_tile, y_tile, idx_tile, kwargs) = payload
    model = MlpModel.from_arrays(dims, activation, params)
    fn = ATTACKS[name]
    return fn(model, x_tile, y_tile, cfg, sample_indices=idx_tile, **kwargs)


def _concat_outcomes(parts: list[AttackOutcome]) -> AttackOutcome:
    success = np.concatenate([p.success for p in parts])
    return AttackOutcome(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        success=success,
        best_loss=np.concatenate([p.best_loss for p in parts]),
        steps_used=np.concatenate([p.steps_used for p in parts]),
        robust_accuracy=float(np.mean(~success)),
    )


def run_attack(name: str, model, x, y, cfg: AttackConfig, *, workers: int = 1,
               tile: int = _TILE, **kwargs) -> AttackOutcome:
    """Run a registered attack over a sample set, tiled and optionally parallel.

    Samples are processed in fixed-size tiles whose boundaries do not depend
    on the worker count, and each sample's randomness is keyed by its global
    index, so the outcome is identical for any ``workers``.
    """
    if name not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}; valid: {sorted(ATTACKS)}")
    x, y = _as_batch(x, y)
    n = y.size
    payloads = []
    dims, act, params = list(model.layer_dims), model.activation, model.parameter_arrays()
    for start in range(0, n, tile):
        stop = min(start + tile, n)
        payloads.append(
            (dims, act, params, name, cfg, x[start:stop], y[start:stop],
             np.arange(start, stop, dtype=np.int64), kwargs)
        )
    if workers <= 1 or len(payloads) <= 1:
        parts = [_run_tile(p) for p in payloads]
    else:
        with multiprocessing.get_context("fork").Pool(processes=workers) as pool:
            parts = pool.map(_run_tile, payloads)
    return _concat_outcomes(parts)


def run_ensemble(model, x, y, members: Sequence[tuple[str, AttackConfig]], *,
                 workers: int = 1, tile: int = _TILE) -> AttackOutcome:
    """Tiled/parallel variant of :func:`ensemble`."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    outcomes = [run_attack(name, model, x, y, cfg, workers=workers, tile=tile) for name, cfg in members]
    return _combine_member_outcomes(model, x, y, [m[0] for m in members], outcomes)
