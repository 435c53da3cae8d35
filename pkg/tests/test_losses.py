"""Adversarial losses: values, gradients, schedules."""

import numpy as np
import pytest

from margindecomp.losses import (
    LossKind,
    StageSchedule,
    eval_loss,
    grad_loss,
    loss_sum_on_tape,
    loss_values,
    margin_values,
    md_select,
    mdmt_select,
    taped_loss,
    zmax_index,
)
from margindecomp.models import init_mlp
from margindecomp.tensor import GradTape, Tensor, backward, finite_diff_grad


class TestLossKind:
    def test_target_consistency(self):
        with pytest.raises(ValueError):
            LossKind("margin", target=3)
        with pytest.raises(ValueError):
            LossKind("targeted_margin")
        with pytest.raises(ValueError):
            LossKind("sigmoid")

    def test_factories(self):
        assert LossKind.ce().tag == "ce"
        assert LossKind.targeted_margin(4).target == 4
        assert LossKind.term_zt(2).targeted


class TestEvalLoss:
    def test_margin_direct(self):
        assert eval_loss(LossKind.margin(), [2.0, 5.0, 1.0], 0) == 3.0

    def test_term_negzy_direct(self):
        assert eval_loss(LossKind.term_negzy(), [2.0, 5.0, 1.0], 0) == -2.0

    def test_term_zmax_direct(self):
        assert eval_loss(LossKind.term_zmax(), [2.0, 5.0, 1.0], 1) == 2.0

    def test_targeted_margin(self):
        assert eval_loss(LossKind.targeted_margin(2), [2.0, 5.0, 1.0], 0) == -1.0

    def test_ce_margin_form_identity(self):
        # CE == log(sum_i e^{z_i}) - z_y, checked numerically on random logits
        rng = np.random.default_rng(5)
        for _ in range(50):
            z = rng.normal(scale=3.0, size=6)
            y = int(rng.integers(6))
            direct = np.log(np.exp(z).sum()) - z[y]
            assert abs(eval_loss(LossKind.ce(), z, y) - direct) < 1e-12

    def test_target_equal_label_rejected(self):
        with pytest.raises(ValueError):
            eval_loss(LossKind.targeted_margin(1), [0.0, 1.0, 2.0], 1)

    def test_margin_positive_iff_misclassified(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            z = rng.normal(size=5)
            y = int(rng.integers(5))
            misclassified = int(np.argmax(z)) != y
            assert (eval_loss(LossKind.margin(), z, y) > 0) == misclassified


class TestZmaxIndex:
    def test_unique_max(self):
        assert zmax_index([2.0, 5.0, 1.0], 0) == 1

    def test_tie_breaks_low(self):
        assert zmax_index([3.0, 3.0, 3.0], 1) == 0

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            z = rng.normal(size=7)
            y = int(rng.integers(7))
            best, best_val = None, -np.inf
            for i, v in enumerate(z):
                if i != y and v > best_val:
                    best, best_val = i, v
            assert zmax_index(z, y) == best


class TestGradLoss:
    def test_linear_model_term_zmax_is_weight_column(self):
        model = init_mlp([4, 3], "relu", seed=1)
        x = Tensor(np.asarray([0.2, 0.4, 0.6, 0.8]))
        logits = model.logits(x).data
        y = 0
        j = zmax_index(logits, y)
        grad = grad_loss(LossKind.term_zmax(), model, x, y).data
        np.testing.assert_array_equal(grad, model.weights[0].data[:, j])

    def test_margin_gradient_additivity(self):
        # grad(margin) == grad(z_max) + grad(-z_y), within 1e-10
        model = init_mlp([6, 16, 4], "tanh", seed=3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = Tensor(rng.uniform(0, 1, 6))
            y = int(rng.integers(4))
            g_margin = grad_loss(LossKind.margin(), model, x, y).data
            g_sum = (
                grad_loss(LossKind.term_zmax(), model, x, y).data
                + grad_loss(LossKind.term_negzy(), model, x, y).data
            )
            np.testing.assert_allclose(g_margin, g_sum, atol=1e-10)

    def test_margin_gradient_matches_finite_differences(self):
        model = init_mlp([5, 12, 3], "tanh", seed=6)
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 20:
            xv = rng.uniform(0, 1, 5)
            y = int(rng.integers(3))
            logits = model.logits(Tensor(xv)).data
            others = np.delete(logits, y)
            others.sort()
            if others.size > 1 and others[-1] - others[-2] < 1e-3:
                continue  # argmax tie inside the FD stencil
            auto = grad_loss(LossKind.margin(), model, Tensor(xv), y).data
            fd = finite_diff_grad(lambda t: eval_loss(LossKind.margin(), model.logits(t), y), Tensor(xv)).data
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(auto - fd) / scale) < 1e-4
            checked += 1


class TestBatchedLosses:
    @pytest.mark.parametrize(
        "kind",
        [LossKind.ce(), LossKind.margin(), LossKind.term_zmax(), LossKind.term_negzy()],
        ids=lambda k: k.tag,
    )
    def test_batch_values_match_per_sample(self, kind):
        rng = np.random.default_rng(11)
        z = rng.normal(scale=2.0, size=(17, 6))
        y = rng.integers(6, size=17)
        batch = loss_values(kind, z, y)
        singles = [eval_loss(kind, z[i], int(y[i])) for i in range(17)]
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_batch_gradients_match_per_sample(self):
        model = init_mlp([4, 8, 3], "tanh", seed=8)
        rng = np.random.default_rng(12)
        x = rng.uniform(0, 1, size=(9, 4))
        y = rng.integers(3, size=9)

        tape = GradTape()
        xt = tape.watch(Tensor(x))
        total = loss_sum_on_tape(LossKind.margin(), tape, model.logits(xt, tape=tape), y)
        batched = backward(tape, total)[xt.uid].data

        for i in range(9):
            single = grad_loss(LossKind.margin(), model, Tensor(x[i]), int(y[i])).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_taped_loss_matches_eval(self):
        model = init_mlp([4, 8, 3], "tanh", seed=8)
        x = Tensor(np.full(4, 0.3))
        tape = GradTape()
        logits = model.logits(tape.watch(x), tape=tape)
        node = taped_loss(LossKind.ce(), tape, logits, 1)
        assert abs(node.item() - eval_loss(LossKind.ce(), model.logits(x), 1)) < 1e-12

    def test_per_sample_targets(self):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(5, 4))
        y = np.asarray([0, 1, 2, 3, 0])
        t = np.asarray([1, 2, 3, 0, 2])
        vals = loss_values(LossKind.targeted_margin(1), z, y, targets=t)
        expected = z[np.arange(5), t] - z[np.arange(5), y]
        np.testing.assert_allclose(vals, expected, atol=1e-12)
        with pytest.raises(ValueError):
            loss_values(LossKind.targeted_margin(1), z, y, targets=y)

    def test_margin_values_helper(self):
        z = np.asarray([[2.0, 5.0, 1.0], [0.0, -1.0, -2.0]])
        np.testing.assert_array_equal(margin_values(z, [0, 0]), [3.0, -1.0])


class TestSchedules:
    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            StageSchedule(10, 11)
        with pytest.raises(ValueError):
            StageSchedule(10, 0)
        with pytest.raises(ValueError):
            StageSchedule(10, 5, parity_origin=2)

    def test_md_select_cases(self):
        sched = StageSchedule(100, 20, parity_origin=0)
        assert md_select(sched, 1, 2) == LossKind.term_zmax()
        assert md_select(sched, 1, 1) == LossKind.term_negzy()
        assert md_select(sched, 20, 1) == LossKind.margin()
        assert md_select(sched, 20, 2) == LossKind.margin()
        assert md_select(sched, 100, 7) == LossKind.margin()

    def test_md_select_parity_origin(self):
        sched = StageSchedule(100, 20, parity_origin=1)
        assert md_select(sched, 1, 1) == LossKind.term_zmax()
        assert md_select(sched, 1, 2) == LossKind.term_negzy()

    def test_md_select_step_range(self):
        sched = StageSchedule(10, 5)
        with pytest.raises(ValueError):
            md_select(sched, 0, 1)
        with pytest.raises(ValueError):
            md_select(sched, 11, 1)

    def test_md_select_is_pure(self):
        sched = StageSchedule(50, 10)
        assert all(md_select(sched, 7, 3) == md_select(sched, 7, 3) for _ in range(5))

    def test_mdmt_select_cases(self):
        sched = StageSchedule(100, 20, parity_origin=0)
        assert mdmt_select(sched, 1, 2, 4) == LossKind.term_zt(4)
        assert mdmt_select(sched, 1, 1, 4) == LossKind.term_negzy()
        assert mdmt_select(sched, 20, 2, 4) == LossKind.targeted_margin(4)
        assert mdmt_select(sched, 99, 1, 4) == LossKind.targeted_margin(4)
