"""MEAN, ridge, GBDT, and the flat MLP baseline plus their JSON artifacts."""

import numpy as np
import pytest

from trialspan.baselines import (
    GBDTConfig,
    flat_features,
    flat_mlp_fit,
    gbdt_fit,
    load_baseline,
    mean_fit,
    ridge_fit,
    save_baseline,
)
from trialspan.errors import SingularSystemError
from trialspan.metrics import r2
from trialspan.training import TrainConfig

from _synth import make_trials


class TestMeanPredictor:
    def test_constant_prediction(self):
        model = mean_fit([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(model.predict(np.zeros((4, 2))), 2.0)

    def test_training_mae_is_mean_absolute_deviation(self):
        rng = np.random.default_rng(0)
        y = rng.uniform(0.1, 9.0, size=50)
        model = mean_fit(y)
        preds = model.predict(np.zeros((50, 1)))
        oracle = sum(abs(v - y.mean()) for v in y) / 50
        assert np.mean(np.abs(preds - y)) == pytest.approx(oracle, abs=1e-12)

    def test_training_r2_is_exactly_zero(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(0.1, 9.0, size=40)
        model = mean_fit(y)
        assert r2(y, model.predict(np.zeros((40, 1)))) == 0.0


class TestRidge:
    def test_exact_interpolation_at_zero_penalty(self):
        x = np.arange(10, dtype=float).reshape(-1, 1)
        y = 2.0 * x[:, 0] + 1.0
        model = ridge_fit(x, y, lam=0.0)
        assert model.w[0] == pytest.approx(2.0, abs=1e-9)
        assert model.b == pytest.approx(1.0, abs=1e-9)

    def test_infinite_penalty_collapses_to_mean(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 4))
        y = rng.uniform(0.5, 5.0, size=30)
        model = ridge_fit(X, y, lam=1e9)
        assert np.abs(model.w).max() < 1e-6
        assert model.b == pytest.approx(y.mean(), abs=1e-4)

    def test_matches_gradient_descent_oracle(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 5))
        y = rng.normal(size=20)
        lam = 0.1
        model = ridge_fit(X, y, lam=lam)

        # independent route: plain gradient descent on the ridge objective
        w = np.zeros(5)
        b = 0.0
        lip = 2 * (np.linalg.eigvalsh(X.T @ X).max() + lam + X.shape[0])
        lr = 1.0 / lip
        for _ in range(200_000):
            resid = X @ w + b - y
            w -= lr * (2 * X.T @ resid + 2 * lam * w)
            b -= lr * 2 * resid.sum()
        np.testing.assert_allclose(model.w, w, atol=1e-6)
        assert model.b == pytest.approx(b, abs=1e-6)

    def test_normal_equations_residual(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 8))
        y = rng.normal(size=40)
        model = ridge_fit(X, y, lam=0.5)
        lhs = (X.T @ X + 0.5 * np.eye(8)) @ model.w
        rhs = X.T @ (y - model.b)
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(1.0, np.linalg.norm(rhs))

    def test_singular_system_reports(self):
        X = np.ones((6, 2))  # duplicate constant columns
        y = np.arange(6, dtype=float)
        with pytest.raises(SingularSystemError):
            ridge_fit(X, y, lam=0.0)
        model = ridge_fit(X, y, lam=1e-6)  # caller retries with a penalty
        assert np.isfinite(model.w).all()


class TestGBDT:
    def test_constant_target(self):
        X = np.random.default_rng(5).normal(size=(20, 3))
        model = gbdt_fit(X, np.full(20, 4.2), GBDTConfig(min_samples_leaf=2))
        assert model.trees == []
        np.testing.assert_allclose(model.predict(X), 4.2)

    def test_hand_computed_stump(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        config = GBDTConfig(n_trees=1, max_depth=1, learning_rate=1.0, min_samples_leaf=1)
        model = gbdt_fit(X, y, config)
        tree = model.trees[0]
        assert tree["threshold"] == pytest.approx(0.5)
        assert tree["feature"] == 0
        assert tree["left"]["value"] == pytest.approx(-5.0)  # residuals around base 5
        assert tree["right"]["value"] == pytest.approx(5.0)
        np.testing.assert_allclose(model.predict(X), y, atol=1e-12)

    def test_training_loss_non_increasing_per_tree(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(60, 5))
        y = X[:, 0] * 2 + np.sin(X[:, 1]) + rng.normal(0, 0.2, size=60)
        config = GBDTConfig(n_trees=40, max_depth=2, learning_rate=0.3, min_samples_leaf=3)
        model = gbdt_fit(X, y, config)
        preds = np.full(60, model.base)
        losses = [np.mean((y - preds) ** 2)]
        for tree in model.trees:
            stump = np.empty(60)
            from trialspan.baselines import _tree_predict
            preds = preds + config.learning_rate * _tree_predict(tree, X)
            losses.append(np.mean((y - preds) ** 2))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_deterministic_tie_breaking(self):
        # two identical features: the split must pick the lower index
        x = np.array([0.0, 0.0, 1.0, 1.0])
        X = np.column_stack([x, x])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        model = gbdt_fit(X, y, GBDTConfig(n_trees=1, max_depth=1,
                                          learning_rate=1.0, min_samples_leaf=1))
        assert model.trees[0]["feature"] == 0

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            gbdt_fit(np.zeros((5, 2)), np.zeros(5), GBDTConfig(min_samples_leaf=3))


class TestFlatMLP:
    def test_overfits_small_dataset(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(16, 10))
        y = rng.uniform(1.0, 4.0, size=16)
        model = flat_mlp_fit(X, y, dropout=0.0, seed=0,
                             train_config=TrainConfig(epochs=800, batch_size=4, lr=0.003))
        assert np.mean((model.predict(X) - y) ** 2) <= 0.01

    def test_positive_outputs(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(30, 6))
        y = rng.uniform(0.5, 5.0, size=30)
        model = flat_mlp_fit(X, y, dropout=0.1, seed=1,
                             train_config=TrainConfig(epochs=5, batch_size=8))
        assert (model.predict(rng.normal(size=(100, 6)) * 10) > 0).all()

    def test_seeded_determinism(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(20, 5))
        y = rng.uniform(0.5, 5.0, size=20)
        a = flat_mlp_fit(X, y, seed=3, train_config=TrainConfig(epochs=10, batch_size=5))
        b = flat_mlp_fit(X, y, seed=3, train_config=TrainConfig(epochs=10, batch_size=5))
        np.testing.assert_array_equal(a.predict(X), b.predict(X))


class TestFlatFeatures:
    def test_layout_and_masked_means(self):
        trials = make_trials(5, seed=10, dim=16)
        X, y, phases = flat_features(trials)
        assert X.shape == (5, 4 + 4 * 16)
        t = trials[0]
        np.testing.assert_array_equal(X[0, :4], t.phase_onehot)
        np.testing.assert_array_equal(X[0, 4:20], t.drug_vec)
        incl_rows = t.sentence_mat[:32][t.sentence_mask[:32]]
        np.testing.assert_allclose(X[0, 36:52], incl_rows.mean(axis=0))
        assert phases[0] == t.phase
        assert y[0] == t.label


class TestArtifacts:
    @pytest.mark.parametrize("builder", [
        lambda X, y: mean_fit(y),
        lambda X, y: ridge_fit(X, y, lam=0.7),
        lambda X, y: gbdt_fit(X, y, GBDTConfig(n_trees=5, max_depth=2, min_samples_leaf=2)),
        lambda X, y: flat_mlp_fit(X, y, seed=2, dropout=0.0,
                                  train_config=TrainConfig(epochs=5, batch_size=8)),
    ])
    def test_save_load_round_trip(self, tmp_path, builder):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(24, 6))
        y = rng.uniform(0.5, 6.0, size=24)
        model = builder(X, y)
        path = tmp_path / "model.json"
        save_baseline(model, path)
        loaded = load_baseline(path)
        assert loaded.kind == model.kind
        np.testing.assert_allclose(loaded.predict(X), model.predict(X), atol=1e-12)
