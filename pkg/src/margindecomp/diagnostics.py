"""Gradient-imbalance measurement and the gradient-masking checklist.

The imbalance ratio compares the two decomposed margin terms coordinate by
coordinate: a dimension is *dominated* by one term when the two term
gradients disagree in sign there and that term's gradient is strictly
larger in magnitude. The L1 mass of the full margin gradient over each
dominated set gives r1 (z_max side) and r2 (-z_y side), and

    GIR = max(r1 / r2, r2 / r1).

One-sided domination (exactly one of r1, r2 zero) is reported as the +inf
sentinel and excluded from means; a model with no dominated dimensions at
all scores a perfectly balanced 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dataclasses import replace as _cfg_replace

from margindecomp.attacks import ATTACKS, AttackConfig, fgsm, pgd, spsa
from margindecomp.losses import LossKind, loss_sum_on_tape, margin_values
from margindecomp.tensor import GradTape, Tensor, add, backward, exp, matmul, mul, neg, sub, tanh

__all__ = [
    "GirEntry",
    "GirReport",
    "dominated_split",
    "gir_from_gradients",
    "gir",
    "gir_report",
    "gir_trajectory",
    "loss_slice",
    "ToyFixture",
    "toy_fixture",
    "term_attack_comparison",
    "RuleResult",
    "ChecklistReport",
    "checklist",
]


def _pair(g_max, g_negy) -> tuple[np.ndarray, np.ndarray]:
    gm = g_max.data if isinstance(g_max, Tensor) else np.asarray(g_max, dtype=np.float64)
    gn = g_negy.data if isinstance(g_negy, Tensor) else np.asarray(g_negy, dtype=np.float64)
    if gm.shape != gn.shape:
        raise ValueError(f"gradient shapes differ: {gm.shape} vs {gn.shape}")
    return gm.reshape(-1), gn.reshape(-1)


def dominated_split(g_max, g_negy) -> tuple[np.ndarray, np.ndarray]:
    """Indices dominated by the z_max term (s1) and by the -z_y term (s2).

    Membership needs opposite signs and a strictly larger magnitude, so
    same-sign, zero-product, and exactly tied dimensions belong to neither.
    """
    gm, gn = _pair(g_max, g_negy)
    opposite = gm * gn < 0.0
    s1 = np.flatnonzero(opposite & (np.abs(gm) > np.abs(gn)))
    s2 = np.flatnonzero(opposite & (np.abs(gn) > np.abs(gm)))
    return s1, s2


@dataclass(frozen=True)
class GirEntry:
    """Per-sample imbalance measurement; ``gir`` is +inf when degenerate."""

    r1: float
    r2: float
    gir: float
    s1_count: int
    s2_count: int

    @property
    def degenerate(self) -> bool:
        return math.isinf(self.gir)


def gir_from_gradients(g_max, g_negy) -> GirEntry:
    """Imbalance entry from the two term gradients of one sample."""
    gm, gn = _pair(g_max, g_negy)
    s1, s2 = dominated_split(gm, gn)
    g_margin = gm + gn
    # L1 masses accumulate in index order so that the result is bit-identical
    # to a per-dimension scalar reference (numpy's pairwise sum is not).
    r1 = float(sum(float(v) for v in np.abs(g_margin[s1])))
    r2 = float(sum(float(v) for v in np.abs(g_margin[s2])))
    if r1 == 0.0 and r2 == 0.0:
        ratio = 1.0
    elif r1 == 0.0 or r2 == 0.0:
        ratio = math.inf
    else:
        ratio = max(r1 / r2, r2 / r1)
    return GirEntry(r1=r1, r2=r2, gir=ratio, s1_count=int(s1.size), s2_count=int(s2.size))


@dataclass(frozen=True)
class GirReport:
    entries: tuple[GirEntry, ...]
    mean_gir: float
    median_gir: float
    fraction_degenerate: float

    @staticmethod
    def from_entries(entries: Sequence[GirEntry]) -> "GirReport":
        finite = [e.gir for e in entries if not e.degenerate]
        return GirReport(
            entries=tuple(entries),
            mean_gir=float(np.mean(finite)) if finite else math.nan,
            median_gir=float(np.median(finite)) if finite else math.nan,
            fraction_degenerate=float(np.mean([e.degenerate for e in entries])),
        )


def _term_gradients(model, x_rows: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched input gradients of z_max and -z_y (rows are independent)."""
    outs = []
    for kind in (LossKind.term_zmax(), LossKind.term_negzy()):
        tape = GradTape()
        xt = tape.watch(Tensor(x_rows))
        logits = model.logits(xt, tape=tape)
        total = loss_sum_on_tape(kind, tape, logits, y)
        outs.append(backward(tape, total)[xt.uid].data)
    return outs[0], outs[1]


def gir(model, x, y: int) -> GirEntry:
    """Imbalance entry of ``model`` at a single input."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    gm, gn = _term_gradients(model, x_arr.reshape(1, -1), np.asarray([y]))
    return gir_from_gradients(gm[0], gn[0])


def gir_report(model, x, y) -> GirReport:
    """Per-sample entries plus aggregate statistics over a sample set."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.int64).reshape(-1)
    gm, gn = _term_gradients(model, x_arr, y_arr)
    return GirReport.from_entries([gir_from_gradients(gm[i], gn[i]) for i in range(y_arr.size)])


def gir_trajectory(model, x, y: int, attack_name: str, cfg: AttackConfig) -> np.ndarray:
    """GIR at every iterate of one attack run on one sample.

    The attack runs with a single restart; the returned array has
    ``steps + 1`` values (the post-noise initialization first).
    """
    if attack_name not in ("pgd", "md"):
        raise ValueError(f"trajectories are recorded for 'pgd' or 'md', got {attack_name!r}")
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    x_rows = x_arr.reshape(1, -1)
    values: list[float] = []

    def hook(step: int, iterate: np.ndarray) -> None:
        entry = gir_from_gradients(*(g[0] for g in _term_gradients(model, iterate, np.asarray([y]))))
        values.append(entry.gir)

    fn = ATTACKS[attack_name]
    fn(model, x_rows, np.asarray([y]), _cfg_replace(cfg, restarts=1), iterate_hook=hook)
    return np.asarray(values)


def loss_slice(model, x, y: int, direction="sign_grad_negzy", alphas=()) -> list[float]:
    """Margin loss along ``x + a * direction`` for each displacement ``a``.

    This is an exploratory probe: the points are evaluated as-is, without
    ball projection or box clipping.
    """
    x_arr = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)).reshape(-1)
    if isinstance(direction, str):
        if direction != "sign_grad_negzy":
            raise ValueError(f"unknown direction kind {direction!r}")
        _, gn = _term_gradients(model, x_arr.reshape(1, -1), np.asarray([y]))
        dir_vec = np.sign(gn[0])
    else:
        dir_vec = np.asarray(direction, dtype=np.float64).reshape(-1)
        if dir_vec.shape != x_arr.shape:
            raise ValueError(f"direction shape {dir_vec.shape} does not match input {x_arr.shape}")
    alphas = [float(a) for a in alphas]
    if not all(math.isfinite(a) for a in alphas):
        raise ValueError("displacements must be finite")
    points = np.stack([x_arr + a * dir_vec for a in alphas]) if alphas else np.empty((0, x_arr.size))
    if points.shape[0] == 0:
        return []
    logits = model.logits(Tensor(points)).data
    return [float(v) for v in margin_values(logits, np.full(len(alphas), y))]


class ToyModel:
    """Differentiable 1-D two-logit landscape with imbalanced gradients.

    The landscape lives on the coordinate ``t in [-2, 2]``; inputs arrive in
    box units ``u in [0, 1]`` with ``t = 4 u - 2`` so the attack machinery's
    [0, 1] clipping is the natural domain. z1 falls steeply through t = 0
    while z2 falls gently, so the margin gradient (z2 - z1 ascent) points
    toward t = +2 even though the only misclassified region (z2 > z1) sits
    near t = -2. Built from smooth primitives so the attacks can
    differentiate it.
    """

    input_dim = 1
    num_classes = 2

    # z1(t) = 0.5 - 0.15 t - 0.4 tanh(2 (t - 0.5))
    # z2(t) = -0.15 t + 1.2 exp(-4 (t + 1.8)^2)

    @staticmethod
    def to_landscape(u):
        """Box units -> landscape coordinate (4u - 2)."""
        return 4.0 * np.asarray(u, dtype=np.float64) - 2.0

    @staticmethod
    def to_box(t):
        """Landscape coordinate -> box units ((t + 2) / 4)."""
        return (np.asarray(t, dtype=np.float64) + 2.0) / 4.0

    def logits(self, x, tape: GradTape | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        from margindecomp.tensor import reshape

        single = x.ndim == 1
        u = reshape(x, (x.size, 1), tape=tape)
        col = add(mul(u, Tensor(4.0), tape=tape), Tensor(-2.0), tape=tape)
        slope = mul(col, Tensor(-0.15), tape=tape)
        z1 = add(
            add(slope, Tensor(np.full((col.shape[0], 1), 0.5)), tape=tape),
            neg(mul(tanh(mul(add(col, Tensor(-0.5), tape=tape), Tensor(2.0), tape=tape), tape=tape), Tensor(0.4), tape=tape), tape=tape),
            tape=tape,
        )
        shifted = add(col, Tensor(1.8), tape=tape)
        bump = mul(exp(mul(mul(shifted, shifted, tape=tape), Tensor(-4.0), tape=tape), tape=tape), Tensor(1.2), tape=tape)
        z2 = add(slope, bump, tape=tape)
        row = add(
            matmul(z1, Tensor([[1.0, 0.0]]), tape=tape),
            matmul(z2, Tensor([[0.0, 1.0]]), tape=tape),
            tape=tape,
        )
        return reshape(row, (2,), tape=tape) if single else row


@dataclass(frozen=True)
class ToyFixture:
    """The 1-D landscape plus its reference facts at the clean point.

    ``x0`` and ``epsilon`` are in box units; the attack budget covers the
    whole landscape interval [-2, 2]. The recorded gradients are the input
    gradients of the two decomposed margin terms at the clean point.
    """

    model: ToyModel
    x0: float
    label: int
    epsilon: float
    grad_z2_at_x0: float
    grad_negz1_at_x0: float


def toy_fixture() -> ToyFixture:
    """Fixed 1-D fixture: correct class 0 at the center, budget = half box.

    At the clean point the two term gradients point in opposite directions
    with the -z1 term dominating, so margin ascent walks to the +2 end of
    the landscape (still correctly classified) while the z2 term alone
    leads into the misclassified region near -2.
    """
    model = ToyModel()
    gm, gn = _term_gradients(model, np.asarray([[0.5]]), np.asarray([0]))
    return ToyFixture(
        model=model,
        x0=0.5,
        label=0,
        epsilon=0.5,
        grad_z2_at_x0=float(gm[0, 0]),
        grad_negz1_at_x0=float(gn[0, 0]),
    )


def term_attack_comparison(model, x, y, cfg: AttackConfig) -> dict[str, float]:
    """PGD success rate under each loss in {CE, margin, z_max, -z_y}.

    All four runs share the budget, schedule, and noise streams of ``cfg``.
    """
    rates = {}
    for name, kind in (
        ("ce", LossKind.ce()),
        ("margin", LossKind.margin()),
        ("term_zmax", LossKind.term_zmax()),
        ("term_negzy", LossKind.term_negzy()),
    ):
        out = pgd(model, x, y, _cfg_replace(cfg, loss=kind))
        rates[name] = float(np.mean(out.success))
    return rates


@dataclass(frozen=True)
class RuleResult:
    name: str
    fired: bool
    measured: dict[str, float]
    note: str


@dataclass(frozen=True)
class ChecklistReport:
    rules: dict[str, RuleResult]
    obfuscation_signs: bool

    def rule(self, name: str) -> RuleResult:
        return self.rules[name]


def _rule_verdicts(
    fgsm_rate: float,
    pgd_rate: float,
    unbounded_rate: float,
    transfer_rate: float,
    spsa_rate: float,
    random_found: int,
    random_candidates: int,
) -> dict[str, RuleResult]:
    """Deterministic thresholds for the five obfuscated-gradient signs."""
    return {
        "fgsm_vs_pgd": RuleResult(
            "fgsm_vs_pgd",
            fired=fgsm_rate > pgd_rate,
            measured={"fgsm": fgsm_rate, "pgd": pgd_rate},
            note="one-step attack beats the iterative attack",
        ),
        "unbounded": RuleResult(
            "unbounded",
            fired=unbounded_rate < 0.999,
            measured={"unbounded": unbounded_rate},
            note="unbounded attack fails to reach full success",
        ),
        "transfer": RuleResult(
            "transfer",
            fired=transfer_rate > pgd_rate,
            measured={"transfer": transfer_rate, "pgd": pgd_rate},
            note="black-box transfer beats the white-box attack",
        ),
        "spsa": RuleResult(
            "spsa",
            fired=spsa_rate > pgd_rate,
            measured={"spsa": spsa_rate, "pgd": pgd_rate},
            note="gradient-free attack beats the gradient attack",
        ),
        "random_sampling": RuleResult(
            "random_sampling",
            fired=random_found > 0,
            measured={"found": float(random_found), "images_checked": float(random_candidates)},
            note="random ball sampling finds adversarials where the attack failed",
        ),
    }


def checklist(
    model,
    substitute,
    x,
    y,
    cfg: AttackConfig,
    *,
    random_samples: int = 10_000,
    spsa_cfg: AttackConfig | None = None,
) -> ChecklistReport:
    """Five-rule obfuscated-gradients test of ``model``.

    ``cfg`` defines the white-box PGD reference; the same settings drive the
    FGSM, unbounded (eps = 1, the full input range), and transfer runs. The
    transfer rule attacks ``substitute`` and evaluates the result on
    ``model``. Random sampling draws ``random_samples`` ball points for each
    image on which PGD failed.
    """
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.int64).reshape(-1)

    pgd_out = pgd(model, x_arr, y_arr, cfg)
    pgd_rate = float(np.mean(pgd_out.success))
    fgsm_rate = float(np.mean(fgsm(model, x_arr, y_arr, cfg).success))

    unbounded_cfg = _cfg_replace(cfg, epsilon=1.0, alpha=0.25, loss=LossKind.margin())
    unbounded_rate = float(np.mean(pgd(model, x_arr, y_arr, unbounded_cfg).success))

    transfer_adv = pgd(substitute, x_arr, y_arr, cfg).x_adv
    transfer_rate = float(np.mean(margin_values(model.logits(Tensor(transfer_adv)).data, y_arr) > 0.0))

    s_cfg = spsa_cfg if spsa_cfg is not None else _cfg_replace(cfg, alpha=cfg.epsilon / 4.0, loss=LossKind.margin())
    spsa_rate = float(np.mean(spsa(model, x_arr, y_arr, s_cfg).success))

    failed = np.flatnonzero(~pgd_out.success)
    found = 0
    for i in failed:
        rng = np.random.default_rng([cfg.seed, int(i), 777])
        chunk = 2000
        remaining = random_samples
        while remaining > 0:
            take = min(chunk, remaining)
            pts = np.clip(x_arr[i] + rng.uniform(-cfg.epsilon, cfg.epsilon, (take, x_arr.shape[1])), 0.0, 1.0)
            margins = margin_values(model.logits(Tensor(pts)).data, np.full(take, y_arr[i]))
            if (margins > 0.0).any():
                found += 1
                break
            remaining -= take

    rules = _rule_verdicts(fgsm_rate, pgd_rate, unbounded_rate, transfer_rate, spsa_rate, found, failed.size)
    return ChecklistReport(rules=rules, obfuscation_signs=any(r.fired for r in rules.values()))
