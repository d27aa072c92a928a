"""Local SGD training and evaluation tests."""

import numpy as np
import pytest

from fedsilo.data import LocalDataset
from fedsilo.errors import EmptySplit, NonFiniteLoss
from fedsilo.models import ModelSpec, init_params
from fedsilo.training import evaluate, local_train


def toy_dataset(n=200, d=4, seed=0, separation=4.0, val_fraction=0.2):
    """Two linearly separable Gaussian blobs."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    centers = np.array([[-separation / 2] * d, [separation / 2] * d])
    features = centers[labels] + rng.normal(size=(n, d))
    n_val = int(n * val_fraction)
    perm = rng.permutation(n)
    return LocalDataset(
        features=features,
        labels=labels.astype(np.int64),
        train_idx=np.sort(perm[n_val:]),
        val_idx=np.sort(perm[:n_val]),
        num_classes=2,
    )


SPEC = ModelSpec(kind="logistic_regression", input_shape=(4,), num_classes=2, init_seed=3)


class TestLocalTrain:
    def test_lr_zero_leaves_weights_unchanged(self):
        data = toy_dataset()
        model = init_params(SPEC)
        out, metrics = local_train(model, SPEC, data, epochs=1, batch_size=16, lr=0.0, seed=1)
        assert np.array_equal(out.values, model.values)
        assert metrics.loss > 0 and 0 <= metrics.accuracy <= 1

    def test_zero_epochs_disallowed(self):
        with pytest.raises(ValueError):
            local_train(init_params(SPEC), SPEC, toy_dataset(), 0, 16, 0.1, 1)

    def test_separable_blobs_reach_high_accuracy(self):
        # pilot with this exact seed reached 1.0 train accuracy by epoch 50
        data = toy_dataset()
        out, metrics = local_train(
            init_params(SPEC), SPEC, data, epochs=50, batch_size=16, lr=0.1, seed=1
        )
        assert metrics.accuracy >= 0.99
        assert evaluate(out, SPEC, data, "val").accuracy >= 0.95

    def test_deterministic_given_seed(self):
        data = toy_dataset()
        a, _ = local_train(init_params(SPEC), SPEC, data, 3, 16, 0.05, seed=9)
        b, _ = local_train(init_params(SPEC), SPEC, data, 3, 16, 0.05, seed=9)
        assert np.array_equal(a.values.view(np.uint64), b.values.view(np.uint64))
        c, _ = local_train(init_params(SPEC), SPEC, data, 3, 16, 0.05, seed=10)
        assert not np.array_equal(a.values, c.values)

    def test_divergence_raises_non_finite_loss(self):
        data = toy_dataset()
        with pytest.raises(NonFiniteLoss):
            local_train(
                init_params(SPEC), SPEC, data, epochs=50, batch_size=16,
                lr=1e12, seed=1, loss="mse",
            )

    def test_wall_time_recorded(self):
        _, metrics = local_train(init_params(SPEC), SPEC, toy_dataset(), 1, 16, 0.1, 1)
        assert metrics.train_seconds >= 0


class TestEvaluate:
    def test_memorizing_model_scores_one(self):
        data = toy_dataset(separation=8.0)
        out, _ = local_train(init_params(SPEC), SPEC, data, 80, 16, 0.2, seed=2)
        assert evaluate(out, SPEC, data, "train").accuracy == 1.0

    def test_uniform_predictor_near_chance(self):
        rng = np.random.default_rng(11)
        n = 1000
        data = LocalDataset(
            features=rng.normal(size=(n, 6)),
            labels=rng.integers(0, 10, size=n).astype(np.int64),
            train_idx=np.arange(n),
            val_idx=np.arange(0),
            num_classes=10,
        )
        spec = ModelSpec(kind="logistic_regression", input_shape=(6,), num_classes=10)
        zero_model = init_params(spec).with_values(np.zeros(len(init_params(spec))))
        acc = evaluate(zero_model, spec, data, "train").accuracy
        assert abs(acc - 0.1) <= 0.03

    def test_empty_val_split(self):
        data = toy_dataset(val_fraction=0.0)
        with pytest.raises(EmptySplit):
            evaluate(init_params(SPEC), SPEC, data, "val")

    def test_no_mutation(self):
        data = toy_dataset()
        model = init_params(SPEC)
        before = model.values.copy()
        evaluate(model, SPEC, data, "train")
        assert np.array_equal(model.values, before)
