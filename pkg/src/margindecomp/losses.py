"""Adversarial objective functions and the MD stage/restart loss schedules.

Every loss is oriented so that *larger means more adversarial*: cross-entropy
is returned as ``-log p_y``, the margin as ``z_max - z_y`` (positive exactly
when the sample is misclassified), and the decomposed terms as ``z_max``,
``-z_y``, ``z_t`` and ``z_t - z_y``.

The two-stage schedules (``md_select`` / ``mdmt_select``) pick one of the
decomposed terms while ``step < stage1_steps``, alternating between the two
terms with the restart parity, and fall back to the full (targeted) margin
for the remaining steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from margindecomp.tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    exp,
    log,
    matmul,
    max_reduce,
    mul,
    reshape,
    sub,
    sum_reduce,
)

__all__ = [
    "LossKind",
    "StageSchedule",
    "zmax_index",
    "eval_loss",
    "taped_loss",
    "grad_loss",
    "md_select",
    "mdmt_select",
    "loss_values",
    "margin_values",
    "loss_sum_on_tape",
    "predicted_class",
]

CE = "ce"
MARGIN = "margin"
TERM_ZMAX = "term_zmax"
TERM_NEGZY = "term_negzy"
TARGETED_MARGIN = "targeted_margin"
TERM_ZT = "term_zt"

_TAGS = {CE, MARGIN, TERM_ZMAX, TERM_NEGZY, TARGETED_MARGIN, TERM_ZT}
_TARGETED = {TARGETED_MARGIN, TERM_ZT}

# Added to the true-class logit before the row max so it can never win; the
# offset stays finite to respect the tensor invariants.
_MASK = 1e9


@dataclass(frozen=True)
class LossKind:
    """One adversarial objective; ``target`` is set only for targeted kinds."""

    tag: str
    target: int | None = None

    def __post_init__(self) -> None:
        if self.tag not in _TAGS:
            raise ValueError(f"unknown loss tag {self.tag!r}; valid: {sorted(_TAGS)}")
        if (self.target is not None) != (self.tag in _TARGETED):
            raise ValueError(f"loss {self.tag!r} and target={self.target} are inconsistent")

    @property
    def targeted(self) -> bool:
        return self.tag in _TARGETED

    @staticmethod
    def ce() -> "LossKind":
        return LossKind(CE)

    @staticmethod
    def margin() -> "LossKind":
        return LossKind(MARGIN)

    @staticmethod
    def term_zmax() -> "LossKind":
        return LossKind(TERM_ZMAX)

    @staticmethod
    def term_negzy() -> "LossKind":
        return LossKind(TERM_NEGZY)

    @staticmethod
    def targeted_margin(target: int) -> "LossKind":
        return LossKind(TARGETED_MARGIN, int(target))

    @staticmethod
    def term_zt(target: int) -> "LossKind":
        return LossKind(TERM_ZT, int(target))


@dataclass(frozen=True)
class StageSchedule:
    """Step budget for the two-stage attacks.

    ``parity_origin`` is the value of ``restart mod 2`` that selects the
    non-true-class term (z_max or z_t) during stage 1. With restarts counted
    from 1 and the default origin 0, the first restart attacks ``-z_y``.
    """

    total_steps: int
    stage1_steps: int
    parity_origin: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.stage1_steps <= self.total_steps:
            raise ValueError(
                f"need 1 <= stage1_steps <= total_steps, got {self.stage1_steps} / {self.total_steps}"
            )
        if self.parity_origin not in (0, 1):
            raise ValueError(f"parity_origin must be 0 or 1, got {self.parity_origin}")


def md_select(schedule: StageSchedule, step: int, restart: int) -> LossKind:
    """Loss kind for the untargeted MD attack at (step, restart)."""
    if not 1 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside 1..{schedule.total_steps}")
    if step < schedule.stage1_steps:
        if restart % 2 == schedule.parity_origin:
            return LossKind.term_zmax()
        return LossKind.term_negzy()
    return LossKind.margin()


def mdmt_select(schedule: StageSchedule, step: int, restart: int, target: int) -> LossKind:
    """Loss kind for the multi-targeted MD attack at (step, restart, target)."""
    if not 1 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside 1..{schedule.total_steps}")
    if step < schedule.stage1_steps:
        if restart % 2 == schedule.parity_origin:
            return LossKind.term_zt(target)
        return LossKind.term_negzy()
    return LossKind.targeted_margin(target)


def _as_logit_rows(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"logits must have at least two classes, got shape {arr.shape}")
    return arr


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return y


def _one_hot(idx: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((idx.size, num_classes))
    out[np.arange(idx.size), idx] = 1.0
    return out


def zmax_index(logits, y: int) -> int:
    """Index of the largest non-true-class logit; ties break to the lowest index."""
    row = _as_logit_rows(logits)[0]
    masked = row.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def predicted_class(logits) -> int:
    """Predicted class = lowest-index argmax of the logits."""
    return int(np.argmax(_as_logit_rows(logits)[0]))


def _resolve_targets(kind: LossKind, y: np.ndarray, targets) -> np.ndarray | None:
    if not kind.targeted and targets is None:
        return None
    if targets is None:
        targets = np.full(y.size, kind.target, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != y.size:
        raise ValueError("targets and labels must align")
    if np.any(targets == y):
        raise ValueError("target class must differ from the true class")
    return targets


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]


def margin_values(logits, y) -> np.ndarray:
    """Per-sample margin loss ``z_max - z_y``; positive iff misclassified."""
    z = _as_logit_rows(logits)
    y = _check_labels(y, z.shape[1])
    masked = z + (-_MASK) * _one_hot(y, z.shape[1])
    return masked.max(axis=1) - z[np.arange(y.size), y]


def loss_values(kind: LossKind, logits, y, targets=None) -> np.ndarray:
    """Per-sample values of ``kind`` on a batch of logits (plain numpy)."""
    z = _as_logit_rows(logits)
    y = _check_labels(y, z.shape[1])
    t = _resolve_targets(kind, y, targets)
    z_y = z[np.arange(y.size), y]
    if kind.tag == CE:
        return _logsumexp_rows(z) - z_y
    if kind.tag == MARGIN:
        return margin_values(z, y)
    if kind.tag == TERM_ZMAX:
        masked = z + (-_MASK) * _one_hot(y, z.shape[1])
        return masked.max(axis=1)
    if kind.tag == TERM_NEGZY:
        return -z_y
    z_t = z[np.arange(y.size), t]
    if kind.tag == TERM_ZT:
        return z_t
    return z_t - z_y  # targeted margin


def eval_loss(kind: LossKind, logits, y: int) -> float:
    """Scalar loss of a single sample's logits."""
    return float(loss_values(kind, logits, np.asarray([y]))[0])


def loss_sum_on_tape(kind: LossKind, tape: GradTape, logits: Tensor, y, targets=None) -> Tensor:
    """Sum over the batch of the per-sample loss, recorded on ``tape``.

    Rows are independent, so the gradient of the sum w.r.t. each input row is
    that row's own loss gradient; this is what the batched attacks rely on.
    """
    if logits.ndim != 2:
        raise ValueError(f"expected batched logits (N, C), got shape {logits.shape}")
    n, c = logits.shape
    y = _check_labels(y, c)
    if y.size != n:
        raise ValueError("labels and logits must align")
    t = _resolve_targets(kind, y, targets)

    hot_y = Tensor(_one_hot(y, c))

    def picked(hot: Tensor) -> Tensor:
        return sum_reduce(mul(logits, hot, tape=tape), axis=1, tape=tape)

    def masked_max() -> Tensor:
        shifted = add(logits, Tensor((-_MASK) * _one_hot(y, c)), tape=tape)
        return max_reduce(shifted, axis=1, tape=tape)

    if kind.tag == CE:
        # log-sum-exp with a detached row-max shift; the shift is constant so
        # the gradient is exactly softmax(z) - onehot(y).
        m = logits.data.max(axis=1, keepdims=True)
        shifted = sub(logits, matmul(Tensor(m), Tensor(np.ones((1, c))), tape=tape), tape=tape)
        lse = add(log(sum_reduce(exp(shifted, tape=tape), axis=1, tape=tape), tape=tape), Tensor(m[:, 0]), tape=tape)
        per = sub(lse, picked(hot_y), tape=tape)
    elif kind.tag == MARGIN:
        per = sub(masked_max(), picked(hot_y), tape=tape)
    elif kind.tag == TERM_ZMAX:
        per = masked_max()
    elif kind.tag == TERM_NEGZY:
        per = sub(Tensor(np.zeros(n)), picked(hot_y), tape=tape)
    elif kind.tag == TERM_ZT:
        per = picked(Tensor(_one_hot(t, c)))
    else:  # targeted margin
        per = sub(picked(Tensor(_one_hot(t, c))), picked(hot_y), tape=tape)
    return sum_reduce(per, tape=tape)


def taped_loss(kind: LossKind, tape: GradTape, logits: Tensor, y: int) -> Tensor:
    """Scalar loss of single-sample logits, recorded on ``tape``."""
    rows = reshape(logits, (1, logits.size), tape=tape) if logits.ndim == 1 else logits
    return loss_sum_on_tape(kind, tape, rows, np.asarray([y]))


def grad_loss(kind: LossKind, model, x: Tensor, y: int) -> Tensor:
    """Input gradient of ``kind`` for one sample through ``model``."""
    tape = GradTape()
    xw = tape.watch(x if isinstance(x, Tensor) else Tensor(x))
    logits = model.logits(xw, tape=tape)
    out = taped_loss(kind, tape, logits, y)
    return backward(tape, out)[xw.uid]
