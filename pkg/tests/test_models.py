"""Models and data: forward contracts, synthesis, training, persistence."""

import numpy as np
import pytest

from margindecomp.models import (
    CheckpointFormatError,
    Dataset,
    InnerAttack,
    MlpModel,
    TrainConfig,
    accuracy,
    checkpoint_metadata,
    init_mlp,
    load_checkpoint,
    load_dataset,
    make_synthetic,
    save_checkpoint,
    save_dataset,
    smooth_labels,
    train,
)
from margindecomp.tensor import DimensionError, Tensor


class TestForward:
    def test_zero_model_uniform(self):
        zero = MlpModel.from_arrays(
            [3, 4],
            "relu",
            [np.zeros((3, 4)), np.zeros((1, 4))],
        )
        logits = zero.logits(Tensor([0.1, 0.2, 0.3])).data
        assert np.array_equal(logits, np.zeros(4))
        probs = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(probs, 0.25)

    def test_linear_model_by_hand(self):
        w = np.asarray([[1.0, -1.0], [2.0, 0.5]])
        b = np.asarray([[0.25, -0.75]])
        model = MlpModel.from_arrays([2, 2], "relu", [w, b])
        x = np.asarray([3.0, -2.0])
        np.testing.assert_allclose(model.logits(Tensor(x)).data, x @ w + b[0], atol=1e-15)

    def test_batch_matches_stacked_singles(self):
        model = init_mlp([5, 7, 3], "relu", seed=2)
        rng = np.random.default_rng(3)
        xs = rng.uniform(0, 1, size=(11, 5))
        batch = model.logits(Tensor(xs)).data
        singles = np.stack([model.logits(Tensor(row)).data for row in xs])
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_width_mismatch(self):
        model = init_mlp([5, 3], "relu", seed=2)
        with pytest.raises(DimensionError):
            model.logits(Tensor(np.zeros(4)))

    def test_forward_accepts_out_of_box_inputs(self):
        model = init_mlp([4, 8, 3], "relu", seed=2)
        logits = model.logits(Tensor([-1.5, 2.0, 0.5, 7.0])).data
        assert np.isfinite(logits).all()


def fit_stump(x, y):
    """Brute-force depth-1 decision stump accuracy (the separability oracle)."""
    best = 0.0
    for d in range(x.shape[1]):
        values = np.sort(np.unique(x[:, d]))
        cuts = (values[1:] + values[:-1]) / 2.0
        for cut in cuts:
            left = x[:, d] <= cut
            for cls_left in (0, 1):
                pred = np.where(left, cls_left, 1 - cls_left)
                best = max(best, float(np.mean(pred == y)))
    return best


class TestMakeSynthetic:
    def test_small_case_counts_and_box(self):
        data = make_synthetic("gaussians", 2, 2, 4, seed=7)
        assert sorted(np.bincount(data.labels).tolist()) == [2, 2]
        assert data.inputs.data.min() >= 0.0 and data.inputs.data.max() <= 1.0

    def test_deterministic(self):
        a = make_synthetic("gaussians", 3, 4, 30, seed=5)
        b = make_synthetic("gaussians", 3, 4, 30, seed=5)
        assert np.array_equal(a.inputs.data, b.inputs.data)
        assert np.array_equal(a.labels, b.labels)

    def test_split_changes_noise_not_geometry(self):
        a = make_synthetic("gaussians", 3, 4, 30, seed=5, split="train")
        b = make_synthetic("gaussians", 3, 4, 30, seed=5, split="test")
        assert not np.array_equal(a.inputs.data, b.inputs.data)

    def test_near_balanced(self):
        data = make_synthetic("spirals", 3, 5, 20, seed=1)
        counts = np.bincount(data.labels, minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_stump_oracle_on_separated_gaussians(self):
        # separation >= 6 sigma: a depth-1 stump must reach 95%
        data = make_synthetic("gaussians", 2, 2, 400, seed=3, sigma=0.02, separation=8.0)
        assert fit_stump(data.inputs.data, data.labels) >= 0.95

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            make_synthetic("gaussians", 1, 2, 10, seed=0)
        with pytest.raises(ValueError):
            make_synthetic("gaussians", 2, 1, 10, seed=0)
        with pytest.raises(ValueError):
            make_synthetic("gaussians", 5, 2, 3, seed=0)
        with pytest.raises(ValueError):
            make_synthetic("rings", 2, 2, 10, seed=0)


class TestSmoothLabels:
    def test_one_hot_limit(self):
        assert smooth_labels(1, 3, 0.0).data.tolist() == [0.0, 1.0, 0.0]

    def test_two_class_half(self):
        assert smooth_labels(0, 2, 0.5).data.tolist() == [0.5, 0.5]

    def test_ten_class_mass(self):
        target = smooth_labels(3, 10, 0.5).data
        assert target[3] == 0.5
        off = np.delete(target, 3)
        np.testing.assert_allclose(off, 0.5 / 9)
        assert abs(target.sum() - 1.0) < 1e-12

    def test_invalid_smoothing(self):
        with pytest.raises(ValueError):
            smooth_labels(0, 3, 1.0)
        with pytest.raises(ValueError):
            smooth_labels(0, 3, -0.1)


class TestTrain:
    def test_separable_gaussians_reach_high_accuracy(self):
        data = make_synthetic("gaussians", 2, 4, 300, seed=4, sigma=0.02, separation=8.0)
        model = init_mlp([4, 16, 2], "relu", seed=1)
        trained, history = train(model, data, TrainConfig(epochs=20, seed=2))
        assert accuracy(trained, data.inputs, data.labels) >= 0.98
        assert len(history) == 20 and history[-1] < history[0]

    def test_zero_epochs_is_identity(self):
        data = make_synthetic("gaussians", 2, 4, 50, seed=4)
        model = init_mlp([4, 8, 2], "relu", seed=1)
        trained, history = train(model, data, TrainConfig(epochs=0, seed=2))
        assert history == []
        for before, after in zip(model.parameter_arrays(), trained.parameter_arrays()):
            assert np.array_equal(before, after)

    def test_training_is_bit_deterministic(self):
        data = make_synthetic("gaussians", 3, 4, 90, seed=4)
        cfg = TrainConfig(epochs=5, seed=9, mode="natural+ls", smoothing=0.3)
        a, _ = train(init_mlp([4, 8, 3], "relu", seed=1), data, cfg)
        b, _ = train(init_mlp([4, 8, 3], "relu", seed=1), data, cfg)
        for pa, pb in zip(a.parameter_arrays(), b.parameter_arrays()):
            assert np.array_equal(pa, pb)

    def test_zero_smoothing_equals_plain_ce(self):
        data = make_synthetic("gaussians", 3, 4, 90, seed=4)
        plain, _ = train(init_mlp([4, 8, 3], "relu", seed=1), data, TrainConfig(epochs=5, seed=9, mode="natural"))
        smoothed0, _ = train(
            init_mlp([4, 8, 3], "relu", seed=1), data,
            TrainConfig(epochs=5, seed=9, mode="natural+ls", smoothing=0.0),
        )
        for pa, pb in zip(plain.parameter_arrays(), smoothed0.parameter_arrays()):
            assert np.array_equal(pa, pb)

    def test_sat_inner_attack_stays_in_ball(self):
        data = make_synthetic("gaussians", 2, 4, 120, seed=4)
        inner = InnerAttack(epsilon=0.03, steps=4, alpha=0.01)
        worst = 0.0

        def audit(epoch, batch_index, x, x_train):
            nonlocal worst
            worst = max(worst, float(np.abs(x_train - x).max()))
            assert x_train.min() >= 0.0 and x_train.max() <= 1.0

        train(
            init_mlp([4, 8, 2], "relu", seed=1), data,
            TrainConfig(epochs=2, seed=9, mode="sat", inner=inner),
            on_batch=audit,
        )
        assert worst <= inner.epsilon + 1e-9
        assert worst > 0.0

    def test_divergence_reports_epoch(self):
        data = make_synthetic("gaussians", 2, 4, 60, seed=4)
        from margindecomp.models import TrainingError

        with pytest.raises(TrainingError, match="epoch"):
            train(init_mlp([4, 8, 2], "relu", seed=1), data, TrainConfig(epochs=120, seed=2, lr=1e6))

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, mode="dropout")
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, smoothing=1.0)


class TestCheckpoint:
    def test_round_trip_forward_identical(self, tmp_path):
        model = init_mlp([5, 9, 4], "tanh", seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, metadata={"mode": "natural", "seed": "6"})
        loaded = load_checkpoint(path)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = Tensor(rng.uniform(0, 1, 5))
            assert np.array_equal(model.logits(x).data, loaded.logits(x).data)
        assert checkpoint_metadata(path) == {"mode": "natural", "seed": "6"}

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = init_mlp([5, 9, 4], "relu", seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_dims_param_count_mismatch(self, tmp_path):
        # shrink a layer dim in the header without touching the payload
        model = init_mlp([5, 9, 4], "relu", seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        import struct

        dims_offset = 4 + 5  # magic + (version, activation, count)
        struct.pack_into("<I", blob, dims_offset, 6)  # 5 -> 6 inputs
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        model = init_mlp([3, 2], "relu", seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            load_checkpoint(path)


class TestDatasetFile:
    def test_round_trip_exact(self, tmp_path):
        data = make_synthetic("gaussians", 3, 4, 25, seed=8)
        path = tmp_path / "data.csv"
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.inputs.data, data.inputs.data)
        assert np.array_equal(loaded.labels, data.labels)
        assert loaded.num_classes == data.num_classes

    def test_header_shape(self, tmp_path):
        data = make_synthetic("gaussians", 3, 4, 25, seed=8)
        path = tmp_path / "data.csv"
        save_dataset(data, path)
        header = path.read_text().splitlines()[0]
        assert header == "4,3,25"

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("not,a\n")
        with pytest.raises(ValueError, match="header"):
            load_dataset(path)

    def test_missing_rows(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("2,2,3\n0.1,0.2,0\n")
        with pytest.raises(ValueError, match="rows"):
            load_dataset(path)


class TestDatasetValidation:
    def test_out_of_box_rejected(self):
        with pytest.raises(ValueError):
            Dataset(Tensor([[0.5, 1.4]]), np.asarray([0]), 2)

    def test_label_range(self):
        with pytest.raises(ValueError):
            Dataset(Tensor([[0.5, 0.5]]), np.asarray([2]), 2)
