import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import inffeed as inf
from inffeed.errors import CapacityError, TrainingError, ValidationError
from inffeed.model import (
    ModelParams,
    fit_arrays,
    flatten,
    grad_arrays,
    hessian_arrays,
    loss_arrays,
    unflatten,
)


def random_problem(seed, C=3, d=4, n=20, l2=0.01):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, C, size=n)
    params = ModelParams(0.5 * rng.standard_normal((C, d)), 0.5 * rng.standard_normal(C), l2)
    return params, X, y


def fd_grad(params, X, y, step=1e-5):
    """Central finite differences of the loss in the canonical flat order."""
    theta = flatten(params)
    out = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        f_up = loss_arrays(unflatten(up, params.num_classes, params.feature_dim, params.l2), X, y)
        f_down = loss_arrays(unflatten(down, params.num_classes, params.feature_dim, params.l2), X, y)
        out[i] = (f_up - f_down) / (2 * step)
    return out


def fd_hessian(params, X, y, step=1e-5):
    theta = flatten(params)
    P = theta.size
    out = np.empty((P, P))
    for i in range(P):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        g_up = grad_arrays(unflatten(up, params.num_classes, params.feature_dim, params.l2), X, y)
        g_down = grad_arrays(unflatten(down, params.num_classes, params.feature_dim, params.l2), X, y)
        out[i] = (g_up - g_down) / (2 * step)
    return out


class TestLoss:
    def test_zero_params_gives_log_C(self):
        for C in (2, 3, 5):
            params = ModelParams.zeros(C, 3, l2=0.1)
            rng = np.random.default_rng(0)
            X = rng.standard_normal((7, 3))
            y = rng.integers(0, C, size=7)
            assert loss_arrays(params, X, y) == pytest.approx(np.log(C), rel=1e-12)

    def test_perfect_prediction_limit(self):
        # huge correct logits, no regularization: loss -> 0
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([0, 1])
        params = ModelParams(1000.0 * np.eye(2), np.zeros(2), l2=0.0)
        assert loss_arrays(params, X, y) < 1e-12

    def test_regularizer_is_additive_in_lambda(self):
        params, X, y = random_problem(1, l2=0.02)
        doubled = ModelParams(params.weights, params.bias, 0.04)
        norm2 = float(np.sum(params.weights**2) + np.sum(params.bias**2))
        assert loss_arrays(doubled, X, y) - loss_arrays(params, X, y) == pytest.approx(
            0.5 * 0.02 * norm2, rel=1e-12
        )

    def test_dimension_mismatch(self):
        params, X, y = random_problem(0)
        with pytest.raises(ValidationError):
            inf.loss(params, [inf.Instance(id="a", features=np.zeros(99), label=0)])

    def test_empty_batch(self):
        params, _, _ = random_problem(0)
        with pytest.raises(ValidationError):
            inf.loss(params, [])


class TestGrad:
    @pytest.mark.parametrize("seed,C,d", [(0, 2, 2), (1, 3, 4), (2, 5, 3)])
    def test_matches_finite_differences(self, seed, C, d):
        params, X, y = random_problem(seed, C=C, d=d)
        g = grad_arrays(params, X, y)
        g_fd = fd_grad(params, X, y)
        assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) < 1e-5

    def test_gradient_of_regularizer_alone(self):
        params, X, y = random_problem(3, l2=0.3)
        bare = ModelParams(params.weights, params.bias, 0.0)
        np.testing.assert_allclose(
            grad_arrays(params, X, y) - grad_arrays(bare, X, y), 0.3 * flatten(params), atol=1e-12
        )

    def test_zero_at_trained_optimum(self):
        # validate on the training split itself so the snapshot is the converged iterate
        c = inf.synth_corpus(inf.SynthConfig(num_classes=3, feature_dim=2, per_class=30, seed=0))
        c = inf.make_splits(c, inf.SplitSpec(sizes={"T": 70, "V": 20}, seed=0))
        params, _ = inf.train(
            c, "T", inf.TrainConfig(learning_rate=0.5, epochs=200000, l2=0.01, grad_tol=1e-7), "T"
        )
        g = inf.grad(params, c.split_instances("T"))
        assert np.max(np.abs(g)) <= 1e-6


class TestHessian:
    def test_exact_symmetry(self):
        params, X, y = random_problem(4)
        H = hessian_arrays(params, X)
        assert np.max(np.abs(H - H.T)) <= 1e-12

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_min_eigenvalue_at_least_lambda(self, seed):
        params, X, y = random_problem(seed, C=3, d=3, l2=0.05)
        H = hessian_arrays(params, X)
        assert np.linalg.eigvalsh(H).min() >= 0.05 - 1e-9

    def test_matches_finite_differences_of_grad(self):
        params, X, y = random_problem(7, C=3, d=3, n=12)
        H = hessian_arrays(params, X)
        H_fd = fd_hessian(params, X, y)
        assert np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd)) < 1e-4

    def test_capacity_cap(self):
        params = ModelParams.zeros(3, 1000, l2=0.01)
        with pytest.raises(CapacityError, match="hvp"):
            hessian_arrays(params, np.zeros((2, 1000)))


class TestHvp:
    def test_matches_dense_product(self):
        params, X, y = random_problem(5)
        H = hessian_arrays(params, X)
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = rng.standard_normal(params.num_params)
            hv = inf.hvp(params, [inf.Instance(str(i), X[i], int(y[i])) for i in range(len(X))], v)
            assert np.linalg.norm(H @ v - hv) / np.linalg.norm(H @ v) < 1e-8

    def test_zero_vector(self):
        params, X, y = random_problem(6)
        from inffeed.model import hvp_arrays

        np.testing.assert_array_equal(hvp_arrays(params, X, None, np.zeros(params.num_params)), 0.0)

    @settings(max_examples=25, deadline=None)
    @given(alpha=st.floats(-100, 100, allow_nan=False))
    def test_linearity_in_scale(self, alpha):
        params, X, y = random_problem(8)
        from inffeed.model import hvp_arrays

        v = np.random.default_rng(1).standard_normal(params.num_params)
        lhs = hvp_arrays(params, X, None, alpha * v)
        rhs = alpha * hvp_arrays(params, X, None, v)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


class TestFlattening:
    def test_round_trip_exact(self):
        params, _, _ = random_problem(9, C=4, d=6)
        back = unflatten(flatten(params), 4, 6, params.l2)
        np.testing.assert_array_equal(back.weights, params.weights)
        np.testing.assert_array_equal(back.bias, params.bias)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValidationError):
            unflatten(np.zeros(7), 2, 2, 0.01)


def blob_corpus(seed=0):
    c = inf.synth_corpus(
        inf.SynthConfig(num_classes=2, feature_dim=2, per_class=100, separation=4.0, noise=1.0, seed=seed)
    )
    return inf.make_splits(c, inf.SplitSpec(sizes={"T": 140, "V": 30, "T_S": 30}, seed=seed))


class TestTrain:
    def test_separable_validation_accuracy(self):
        c = blob_corpus()
        params, _ = inf.train(c, "T", inf.TrainConfig(learning_rate=0.5, epochs=500, l2=0.005), "V")
        preds = inf.predict(params, c.features_of(c.split_ids("V")))
        assert (preds == c.labels_of(c.split_ids("V"))).mean() >= 0.95

    def test_zero_learning_rate_is_identity(self):
        c = blob_corpus()
        params, _ = inf.train(c, "T", inf.TrainConfig(learning_rate=0.0, epochs=1, l2=0.01), "V")
        np.testing.assert_array_equal(params.weights, 0.0)
        np.testing.assert_array_equal(params.bias, 0.0)

    def test_deterministic(self):
        c = blob_corpus()
        cfg = inf.TrainConfig(learning_rate=0.2, epochs=50, l2=0.01, seed=11, optimizer="sgd", batch_size=16)
        a, _ = inf.train(c, "T", cfg, "V")
        b, _ = inf.train(c, "T", cfg, "V")
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_divergence_raises_with_epoch(self):
        c = blob_corpus()
        with pytest.raises(TrainingError) as exc:
            inf.train(c, "T", inf.TrainConfig(learning_rate=1e6, epochs=50, l2=0.01), "V")
        assert exc.value.epoch is not None

    def test_best_validation_snapshot(self):
        c = blob_corpus()
        params, report = inf.train(c, "T", inf.TrainConfig(learning_rate=0.5, epochs=100, l2=0.005), "V")
        assert report.val_losses[report.best_epoch] == min(report.val_losses)

    def test_report_has_per_epoch_curves(self):
        c = blob_corpus()
        _, report = inf.train(c, "T", inf.TrainConfig(learning_rate=0.1, epochs=20, l2=0.01), "V")
        assert len(report.train_losses) == 21 and len(report.val_losses) == 21

    def test_convexity_initialization_independence(self):
        # GD to convergence from zeros vs from a random start: same optimum
        # (validate on the training split so the snapshot is the converged iterate)
        c = blob_corpus()
        cfg = inf.TrainConfig(learning_rate=0.5, epochs=200000, l2=0.01, grad_tol=1e-9)
        a, _ = inf.train(c, "T", cfg, "T")
        rng = np.random.default_rng(5)
        start = ModelParams(rng.standard_normal((2, 2)), rng.standard_normal(2), 0.01)
        b, _ = inf.fine_tune(start, c, "T", cfg, "T")
        assert np.linalg.norm(flatten(a) - flatten(b)) <= 1e-3


class TestFineTune:
    def test_zero_epochs_identity(self):
        c = blob_corpus()
        params, _ = inf.train(c, "T", inf.TrainConfig(learning_rate=0.5, epochs=50, l2=0.01), "V")
        same, _ = inf.fine_tune(params, c, "T", inf.TrainConfig(learning_rate=0.5, epochs=0, l2=0.01), "V")
        np.testing.assert_array_equal(same.weights, params.weights)

    def test_does_not_increase_train_loss_from_optimum(self):
        c = blob_corpus()
        cfg = inf.TrainConfig(learning_rate=0.5, epochs=100000, l2=0.01, grad_tol=1e-9)
        params, _ = inf.train(c, "T", cfg, "V")
        before = inf.loss(params, c.split_instances("T"))
        tuned, _ = inf.fine_tune(params, c, "T", inf.TrainConfig(learning_rate=0.5, epochs=200, l2=0.01), "V")
        after = inf.loss(tuned, c.split_instances("T"))
        assert after <= before + 1e-6

    def test_relabeled_finetune_changes_predictions(self):
        # flip 20% of the tuning split: at least one validation point moves
        c = blob_corpus()
        params, _ = inf.train(c, "T", inf.TrainConfig(learning_rate=0.5, epochs=2000, l2=0.005, grad_tol=1e-7), "V")
        noisy = inf.inject_label_noise(c, "T", 0.2, seed=3)
        tuned, _ = inf.fine_tune(
            params, noisy, "T", inf.TrainConfig(learning_rate=0.5, epochs=2000, l2=0.005, grad_tol=1e-7), "V"
        )
        Xv = c.features_of(c.split_ids("V"))
        assert (inf.predict(params, Xv) != inf.predict(tuned, Xv)).any() or not np.allclose(
            flatten(params), flatten(tuned)
        )

    def test_dimension_mismatch(self):
        c = blob_corpus()
        with pytest.raises(ValidationError):
            inf.fine_tune(ModelParams.zeros(2, 9, 0.01), c, "T", inf.TrainConfig(l2=0.01), "V")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params, _, _ = random_problem(2)
        from inffeed.model import load_checkpoint, save_checkpoint

        p = tmp_path / "model.json"
        save_checkpoint(params, p)
        back = load_checkpoint(p)
        np.testing.assert_array_equal(back.weights, params.weights)
        np.testing.assert_array_equal(back.bias, params.bias)
        assert back.l2 == params.l2

    def test_checksum_stable(self):
        params, _, _ = random_problem(2)
        from inffeed.model import checkpoint_checksum

        assert checkpoint_checksum(params) == checkpoint_checksum(params)


class TestTrainConfigValidation:
    def test_l2_must_be_positive(self):
        with pytest.raises(ValidationError):
            inf.TrainConfig(l2=0.0)

    def test_unknown_optimizer(self):
        with pytest.raises(ValidationError):
            inf.TrainConfig(optimizer="adam")
