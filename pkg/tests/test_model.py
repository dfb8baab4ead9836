import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import kkt_ok, ridge_oracle
from tractscope.model import (
    ConvergenceError,
    CvResult,
    ElasticNetConfig,
    ElasticNetFit,
    assign_folds,
    fit_at_lambda,
    fit_elastic_net,
    fit_path,
    kfold_cv,
    lambda_path,
    objective,
    predict,
    select_lambda,
    soft_threshold,
    standardize,
    train_test_split,
)
from tractscope.rng import SplitMix64


class TestRng:
    def test_reference_values(self):
        # published SplitMix64 outputs for seed 1234567
        g = SplitMix64(1234567)
        assert [g.next_u64() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]

    def test_permutation_is_permutation(self):
        p = SplitMix64(3).permutation(50)
        assert sorted(p) == list(range(50))

    def test_float_range(self):
        g = SplitMix64(9)
        xs = [g.next_float() for _ in range(1000)]
        assert 0 <= min(xs) and max(xs) < 1


class TestStandardize:
    def test_column(self):
        Xs, means, sds, dropped = standardize(np.array([[1.0], [2.0], [3.0]]))
        # mean 2, population sd sqrt(2/3)
        expected = np.array([-1, 0, 1]) / math.sqrt(2 / 3)
        assert np.allclose(Xs[:, 0], expected)
        assert np.allclose(Xs[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
        assert dropped == []

    def test_constant_dropped(self):
        X = np.column_stack([[1.0, 2, 3, 4], [5.0, 5, 5, 5]])
        Xs, means, sds, dropped = standardize(X)
        assert dropped == [1]
        assert Xs.shape == (4, 1)

    def test_idempotent(self):
        X = np.random.default_rng(0).normal(size=(20, 4)) * 3 + 1
        Xs, *_ = standardize(X)
        Xs2, *_ = standardize(Xs)
        assert np.allclose(Xs, Xs2, atol=1e-12)

    def test_all_constant(self):
        with pytest.raises(ValueError):
            standardize(np.ones((5, 2)))


class TestSoftThreshold:
    @pytest.mark.parametrize("z,g,out", [(3, 1, 2), (-0.5, 1, 0), (-3, 1, -2), (0.5, 0, 0.5)])
    def test_values(self, z, g, out):
        assert soft_threshold(z, g) == out

    @given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
    def test_shrinks(self, z, g):
        s = soft_threshold(z, g)
        assert abs(s) <= abs(z)
        assert s == 0 or math.copysign(1, s) == math.copysign(1, z)


class TestFitAtLambda:
    def test_null_model_at_lambda_max(self):
        rng = np.random.default_rng(1)
        Xs, *_ = standardize(rng.normal(size=(30, 6)))
        y = rng.normal(size=30) + 4
        for alpha in (1.0, 0.5, 0.1):
            lam_max = lambda_path(Xs, y, alpha, 5)[0]
            for lam in (lam_max, 2 * lam_max):
                fit = fit_at_lambda(Xs, y, lam, alpha)
                assert np.all(fit.beta == 0)
                assert fit.intercept == pytest.approx(y.mean())

    def test_ols_single_column(self):
        Xs, *_ = standardize(np.array([[1.0], [2.0], [4.0], [7.0]]))
        y = 2 * Xs[:, 0]
        fit = fit_at_lambda(Xs, y, 0.0, 0.5)
        assert fit.beta[0] == pytest.approx(2.0, abs=1e-6)

    def test_ridge_closed_form(self):
        rng = np.random.default_rng(2)
        Xs, *_ = standardize(rng.normal(size=(10, 3)))
        y = rng.normal(size=10)
        for lam in (0.01, 0.3, 2.0):
            fit = fit_at_lambda(Xs, y, lam, 0.0)
            assert np.max(np.abs(fit.beta - ridge_oracle(Xs, y, lam))) < 1e-6
            assert kkt_ok(Xs, y, fit, 1e-7)

    def test_objective_monotone_per_sweep(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 12))
        X[:, 1] = X[:, 0] + 0.05 * rng.normal(size=40)
        Xs, *_ = standardize(X)
        y = X[:, 0] - 2 * X[:, 3] + rng.normal(size=40)
        for alpha in (1.0, 0.5, 0.0):
            lam = 0.05
            beta = np.zeros(12)
            prev = objective(Xs, y, y.mean(), beta, lam, alpha)
            for _ in range(60):
                try:
                    f = fit_at_lambda(Xs, y, lam, alpha, beta, tol=1e-7, max_sweeps=1)
                except ConvergenceError as e:
                    f = e.partial
                cur = objective(Xs, y, f.intercept, f.beta, lam, alpha)
                assert cur <= prev + 1e-12
                prev, beta = cur, f.beta

    def test_kkt_random(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            Xs, *_ = standardize(rng.normal(size=(25, 8)))
            y = Xs @ (rng.normal(size=8) * rng.integers(0, 2, 8)) + rng.normal(size=25)
            for lam in lambda_path(Xs, y, 0.7, 6):
                assert kkt_ok(Xs, y, fit_at_lambda(Xs, y, lam, 0.7), 1e-7)

    def test_max_sweeps_reported(self):
        rng = np.random.default_rng(5)
        Xs, *_ = standardize(rng.normal(size=(20, 5)))
        y = rng.normal(size=20)
        with pytest.raises(ConvergenceError):
            fit_at_lambda(Xs, y, 1e-4, 0.5, max_sweeps=1, tol=1e-15)

    def test_warm_equals_cold(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            X = rng.normal(size=(30, 10))
            Xs, *_ = standardize(X)
            y = X[:, :3] @ np.array([1.0, -1, 0.5]) + 0.3 * rng.normal(size=30)
            lams = lambda_path(Xs, y, 0.5, 30)
            warm = fit_path(Xs, y, lams, 0.5, tol=1e-10)
            for lam, w in zip(lams, warm):
                cold = fit_at_lambda(Xs, y, lam, 0.5, tol=1e-10)
                assert np.linalg.norm(w.beta - cold.beta) < 1e-6


class TestLambdaPath:
    def test_shape(self):
        rng = np.random.default_rng(7)
        Xs, *_ = standardize(rng.normal(size=(15, 4)))
        y = rng.normal(size=15)
        lams = lambda_path(Xs, y, 0.5, 100, 1e-3)
        assert len(lams) == 100
        assert np.all(np.diff(lams) < 0)
        assert lams[-1] / lams[0] == pytest.approx(1e-3)

    def test_single_column_value(self):
        Xs, *_ = standardize(np.array([[1.0], [3.0], [4.0], [8.0]]))
        y = Xs[:, 0].copy()
        for alpha in (1.0, 0.5, 0.0):
            assert lambda_path(Xs, y, alpha, 3)[0] == pytest.approx(1 / max(alpha, 0.001), rel=1e-9)

    def test_constant_response(self):
        Xs, *_ = standardize(np.arange(10.0).reshape(5, 2) ** 2)
        with pytest.raises(ValueError, match="zero-variance response"):
            lambda_path(Xs, np.ones(5), 0.5)


class TestCv:
    def test_fold_partition(self):
        fold_of = assign_folds(10, 5, 0)
        assert np.bincount(fold_of).tolist() == [2] * 5

    def test_auto_folds(self):
        cfg = ElasticNetConfig()
        assert cfg.resolve_folds(150) == 3
        assert cfg.resolve_folds(199) == 3
        assert cfg.resolve_folds(200) == 5
        assert ElasticNetConfig(folds=4).resolve_folds(150) == 4

    def test_deterministic_and_oof_coverage(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(40, 6))
        y = X[:, 0] + rng.normal(size=40)
        cfg = ElasticNetConfig(seed=11, path_length=20, folds=5)
        a = kfold_cv(X, y, cfg)
        b = kfold_cv(X, y, cfg)
        assert np.array_equal(a.fold_of, b.fold_of)
        assert np.array_equal(a.oof_path, b.oof_path)
        assert np.array_equal(a.mean_cv_mse, b.mean_cv_mse)
        assert np.isfinite(a.oof_path).all() and a.oof_path.shape == (40, 20)
        c = kfold_cv(X, y, ElasticNetConfig(seed=11, path_length=20, folds=5, jobs=4))
        assert np.array_equal(a.oof_path, c.oof_path)

    def test_small_fold_error(self):
        X = np.random.default_rng(0).normal(size=(5, 2))
        with pytest.raises(ValueError):
            kfold_cv(X, X[:, 0], ElasticNetConfig(folds=3))

    def test_oof_uses_training_rows_only(self):
        # a held-out row's prediction must not change when its own y changes
        rng = np.random.default_rng(9)
        X = rng.normal(size=(30, 4))
        y = X @ np.array([1.0, 2, 0, 0]) + rng.normal(size=30)
        cfg = ElasticNetConfig(seed=1, path_length=10, folds=3)
        a = kfold_cv(X, y, cfg)
        y2 = y.copy()
        y2[0] += 100
        b = kfold_cv(X, y2, cfg, lambdas=a.lambdas)
        assert np.allclose(a.oof_path[0], b.oof_path[0])


def _cv(mse):
    mse = np.asarray(mse, float)
    return CvResult(np.linspace(1, 0.1, len(mse)), mse, mse[None], np.zeros(1), np.zeros((1, len(mse))), 2)


class TestSelect:
    def test_cap_inactive(self):
        cv = _cv([5, 3, 1, 2])
        assert select_lambda(cv, 100, [0, 1, 2, 3]) == 2

    def test_cap_binds(self):
        cv = _cv([5, 3, 1, 2])
        assert select_lambda(cv, 1, [0, 1, 2, 3]) == 1
        assert select_lambda(cv, 1, [0, 4, 4, 4]) == 0

    def test_tie_prefers_larger_lambda(self):
        cv = _cv([5, 2, 2, 3])
        assert select_lambda(cv, 10, [0, 1, 2, 3]) == 1

    def test_invalid_cap(self):
        with pytest.raises(ValueError):
            select_lambda(_cv([1]), 0, [0])


class TestSplit:
    def test_split_sizes_1695(self):
        train, test = train_test_split(range(1695), 0.6, seed=0)
        assert (len(train), len(test)) == (1017, 678)

    def test_partition(self):
        ids = [f"t{i}" for i in range(37)]
        train, test = train_test_split(ids, 0.6, 5)
        assert set(train) | set(test) == set(ids)
        assert not set(train) & set(test)

    def test_seeded(self):
        ids = list(range(100))
        assert train_test_split(ids, 0.6, 1) == train_test_split(ids, 0.6, 1)
        assert train_test_split(ids, 0.6, 1) != train_test_split(ids, 0.6, 2)

    def test_errors(self):
        with pytest.raises(ValueError):
            train_test_split([1], 0.5, 0)
        with pytest.raises(ValueError):
            train_test_split([1, 2], 1.0, 0)


class TestPredict:
    def test_zero_coefficients(self):
        fit = ElasticNetFit(3.5, np.zeros(3), 1.0, 0.5, np.zeros(3), np.ones(3), [], 0, ["a", "b", "c"])
        assert np.all(predict(fit, np.random.default_rng(0).normal(size=(4, 3))) == 3.5)

    def test_column_mismatch(self):
        fit = ElasticNetFit(0.0, np.zeros(3), 1.0, 0.5, np.zeros(3), np.ones(3), [], 0)
        with pytest.raises(ValueError, match="column mismatch"):
            predict(fit, np.zeros((2, 4)))

    def test_ols_residuals(self):
        x = np.array([[1.0], [2.0], [4.0], [7.0], [11.0]])
        y = 2 * x[:, 0] + 1
        Xs, means, sds, _ = standardize(x)
        f = fit_at_lambda(Xs, y, 0.0, 0.5)
        fit = ElasticNetFit(float(f.intercept - f.beta[0] / sds[0] * means[0]), f.beta / sds, 0.0, 0.5,
                            means, sds, [], 1)
        assert np.allclose(predict(fit, x), y, atol=1e-6)

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(60, 5))
        y = X @ np.array([1.0, 0, -0.5, 0, 0.2]) + 0.5 * rng.normal(size=60)
        cfg = ElasticNetConfig(seed=3, path_length=30)
        fit, _ = fit_elastic_net(X, y, cfg)
        scale = np.array([10.0, -0.1, 3.0, 1e3, 0.5])
        shift = np.array([5.0, -2.0, 100.0, 0.0, 1.0])
        fit2, _ = fit_elastic_net(X * scale + shift, y, cfg)
        assert np.max(np.abs(predict(fit, X) - predict(fit2, X * scale + shift))) < 1e-6


class TestFitElasticNet:
    def test_recovers_sparse_signal(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(120, 20))
        y = 3 * X[:, 0] - 2 * X[:, 5] + 0.1 * rng.normal(size=120)
        fit, cv = fit_elastic_net(X, y, ElasticNetConfig(alpha=1.0, seed=1))
        assert fit.coefficients[0] == pytest.approx(3, abs=0.1)
        assert fit.coefficients[5] == pytest.approx(-2, abs=0.1)
        assert cv.folds == 3
        assert fit.active_set_size == np.count_nonzero(fit.coefficients)

    def test_dropped_column_zero(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(30, 3))
        X[:, 1] = 7.0
        fit, _ = fit_elastic_net(X, X[:, 0] + 0.1 * rng.normal(size=30), ElasticNetConfig(path_length=10),
                                 columns=["a", "b", "c"])
        assert fit.dropped_columns == ["b"]
        assert fit.coefficients[1] == 0

    def test_json_round_trip(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(30, 3))
        y = X[:, 0] + rng.normal(size=30)
        fit, cv = fit_elastic_net(X, y, ElasticNetConfig(path_length=10))
        back = ElasticNetFit.from_json(fit.to_json(cv, seed=0))
        assert np.allclose(predict(back, X), predict(fit, X))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32))
    def test_cap_respected(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(40, 15))
        y = X @ rng.normal(size=15) + rng.normal(size=40)
        fit, _ = fit_elastic_net(X, y, ElasticNetConfig(feature_cap=3, path_length=20, seed=seed))
        assert fit.active_set_size <= 3
