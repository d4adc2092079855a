import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renyigp.kernels import SE, Hyperparams, KernelSpec, gram
from renyigp.linalg import SolverConfig
from renyigp.model import (
    Dataset,
    FitConfig,
    GPModel,
    InducingSet,
    argmin_alpha,
    destandardize,
    fit,
    initial_hyperparams,
    predict,
    rmse,
    select_alpha,
    select_inducing,
    standardize,
    user_inducing,
)

from oracles import kernel_matrix


def sine_data(seed, n=200, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, n)
    return Dataset(X, np.sin(X) + noise * rng.normal(size=n))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.array([[0.0], [np.nan]]), np.zeros(2))
    d = Dataset([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (d.N, d.D) == (3, 1)


def test_standardize_sample_std():
    d = standardize(Dataset([[0.0], [1.0], [5.0]], [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(d.y, [-1.0, 0.0, 1.0], atol=1e-15)


def test_standardize_moments_and_round_trip():
    rng = np.random.default_rng(0)
    raw = Dataset(rng.normal(3, 5, size=(50, 3)), rng.normal(-2, 0.1, 50))
    d = standardize(raw)
    np.testing.assert_allclose(d.X.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(d.X.std(axis=0, ddof=1), 1, atol=1e-10)
    assert abs(d.y.mean()) < 1e-10 and abs(d.y.std(ddof=1) - 1) < 1e-10
    back = destandardize(d)
    np.testing.assert_allclose(back.X, raw.X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.y, raw.y, rtol=1e-12, atol=1e-12)
    again = standardize(Dataset(d.X, d.y))
    np.testing.assert_allclose(again.X, d.X, atol=1e-10)


def test_standardize_rejects_constant_columns():
    with pytest.raises(ValueError, match="x2"):
        standardize(Dataset([[0.0, 1.0], [1.0, 1.0]], [0.0, 1.0]))
    with pytest.raises(ValueError, match="target"):
        standardize(Dataset([[0.0], [1.0]], [1.0, 1.0]))


def test_rmse():
    assert rmse([1, 2], [1, 2]) == 0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    t = np.array([-1.0, 2.0, -1.0])
    assert rmse(np.zeros(3), t) == pytest.approx(t.std())
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def test_select_inducing_strategies():
    d = standardize(sine_data(1, 40))
    a = select_inducing(d, 5, "random", seed=3)
    b = select_inducing(d, 5, "random", seed=3)
    np.testing.assert_array_equal(a.Z, b.Z)
    assert all(any(np.array_equal(z, x) for x in d.X) for z in a.Z)
    full = select_inducing(d, 40, "kdpp-approx", KernelSpec(SE, Hyperparams(1, 1, 1)))
    assert full.M == 40
    k = select_inducing(d, 6, "kdpp-approx", KernelSpec(SE, Hyperparams(0.5, 1, 1)), seed=2)
    assert k.M == 6 and k.epsilon == 1e-2
    small = Dataset(d.X[:8], d.y[:8])
    assert select_inducing(small, 3, "kdpp-exact", KernelSpec(SE, Hyperparams(1, 1, 1)), seed=0).M == 3
    with pytest.raises(ValueError):
        select_inducing(d, 41)
    with pytest.raises(ValueError):
        select_inducing(d, 3, "grid")
    assert user_inducing([[0.0]]).provenance == "user"
    with pytest.raises(ValueError):
        InducingSet(np.zeros((0, 1)), "user")


def test_initial_hyperparams_median_heuristic():
    X = np.array([[0.0], [1.0], [3.0]])
    hp = initial_hyperparams(X)
    assert (hp.lengthscale, hp.signal_variance, hp.noise_variance) == (2.0, 1.0, 0.1)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        FitConfig(max_iterations=-1)
    with pytest.raises(ValueError):
        FitConfig(tolerance=0)


def test_fit_monotone_trace_and_noise_recovery():
    ratios = []
    for seed in range(5):
        m = fit(sine_data(seed), 20, 0.5)
        trace = np.array(m.diagnostics["objective_trace"])
        assert np.all(np.diff(trace) >= 0)
        ratios.append(m.original_hyperparams()["noise_variance"] / 0.01)
    med = np.median(ratios)
    assert 0.5 <= med <= 2.0


def test_fit_other_optimizers_run():
    d = sine_data(0, 80)
    g = fit(d, 10, 0.3, config=FitConfig(optimizer="gradient", max_iterations=30))
    assert np.all(np.diff(g.diagnostics["objective_trace"]) >= 0)
    a = fit(d, 10, 0.3, config=FitConfig(optimizer="adam", max_iterations=50))
    assert np.isfinite(a.diagnostics["final_objective"])


def test_zero_iterations_returns_initialization():
    d = sine_data(0, 50)
    m = fit(d, 10, 0.5, config=FitConfig(max_iterations=0))
    init = initial_hyperparams(standardize(d).X)
    assert m.hyperparams == init
    assert m.diagnostics["zero_iterations"] and m.diagnostics["iterations"] == 0


def test_restarts_pick_best():
    m = fit(sine_data(2, 80), 10, 0.4, config=FitConfig(restarts=3, seed=5))
    objs = m.diagnostics["restart_objectives"]
    assert len(objs) == 3
    assert m.diagnostics["final_objective"] == max(objs)


def test_prior_parameter_recovery():
    rng = np.random.default_rng(7)
    N = 500
    X = rng.normal(size=(N, 1))
    true = Hyperparams(0.8, 1.0, 0.1)
    K = gram(KernelSpec(SE, true), X) + true.noise_variance * np.eye(N)
    y = np.linalg.cholesky(K) @ rng.normal(size=N)
    data = Dataset(X, y, None)
    from renyigp.model import Standardization

    ident = Standardization((0.0,), (1.0,), 0.0, 1.0)
    m = fit(Dataset(X, y, ident), N, 0.0, config=FitConfig(initial=Hyperparams(1.0, 1.0, 0.3)))
    err = np.abs(m.hyperparams.to_log() - true.to_log())
    assert np.all(err <= 0.5)
    assert data.N == N


def test_cache_residual_and_positive_variance():
    m = fit(sine_data(3), 20, 0.3)
    assert m.cache_residual() <= 1e-6
    mean, var = predict(m, m.training.X * 0 + np.asarray(sine_data(3).X))
    assert np.all(np.isfinite(mean)) and np.all(var > 0)


def _dense_prediction(X, y, Z, spec, alpha, Xs, jitter_rel=1e-6):
    hp = spec.hyperparams
    f = lambda A, B: kernel_matrix(spec.family, spec.order, hp, A, B)
    K = f(X, X)
    K_UU = f(Z, Z) + jitter_rel * hp.signal_variance * np.eye(len(Z))
    K_fU = f(X, Z)
    Q = K_fU @ np.linalg.solve(K_UU, K_fU.T)
    Xi = hp.noise_variance * np.eye(len(y)) + (1 - alpha) * K + alpha * Q
    cross = f(Xs, Z) @ np.linalg.solve(K_UU, K_fU.T)
    mean = cross @ np.linalg.solve(Xi, y)
    cov = f(Xs, Xs) + hp.noise_variance * np.eye(len(Xs)) - cross @ np.linalg.solve(Xi, cross.T)
    return mean, np.diag(cov)


def test_predict_matches_dense_formula():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(15, 2))
    y = rng.normal(size=15)
    Xs = rng.normal(size=(6, 2))
    d = standardize(Dataset(X, y))
    inducing = select_inducing(d, 4, seed=1)
    m = fit(d, inducing=inducing, alpha=0.4, config=FitConfig(max_iterations=5))
    mean, var = predict(m, Xs)
    st = d.standardization
    ref_m, ref_v = _dense_prediction(d.X, d.y, inducing.Z, m.kernel, 0.4, st.transform_X(Xs))
    np.testing.assert_allclose(mean, st.inverse_y(ref_m), rtol=1e-8)
    np.testing.assert_allclose(var, ref_v * st.y_std**2, rtol=1e-8)


def test_predict_exact_gp_agreement():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(25, 1))
    y = np.sin(2 * X[:, 0]) + 0.05 * rng.normal(size=25)
    d = standardize(Dataset(X, y))
    m = fit(d, 25, 0.0, config=FitConfig(max_iterations=20, solver=SolverConfig(jitter=1e-12)))
    Xs = np.linspace(-2, 2, 9)[:, None]
    hp = m.hyperparams
    K = kernel_matrix("se", 1, hp, d.X, d.X) + hp.noise_variance * np.eye(25)
    ks = kernel_matrix("se", 1, hp, d.standardization.transform_X(Xs), d.X)
    ref_mean = ks @ np.linalg.solve(K, d.y)
    ref_var = hp.signal_variance + hp.noise_variance - np.sum(ks * np.linalg.solve(K, ks.T).T, axis=1)
    mean, var = predict(m, Xs)
    st = d.standardization
    np.testing.assert_allclose(mean, st.inverse_y(ref_mean), atol=1e-6 * st.y_std)
    np.testing.assert_allclose(var, ref_var * st.y_std**2, atol=1e-6 * st.y_std**2)


def test_near_interpolation_and_prior_reversion():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, size=(10, 1))
    y = np.sin(3 * X[:, 0])
    from renyigp.model import Standardization

    ident = Standardization((0.0,), (1.0,), 0.0, 1.0)
    d = Dataset(X, y, ident)
    hp = Hyperparams(0.5, 1.0, 1e-6)
    m = fit(d, 10, 0.3, config=FitConfig(max_iterations=0, initial=hp))
    mean, _ = predict(m, X)
    np.testing.assert_allclose(mean, y, atol=1e-2)
    far_mean, far_var = predict(m, np.array([[50.0]]))
    assert abs(far_mean[0]) < 1e-10
    assert far_var[0] == pytest.approx(1.0 + 1e-6, rel=1e-9)


def test_predict_dimension_mismatch_and_empty():
    m = fit(sine_data(0, 40), 5, 0.5, config=FitConfig(max_iterations=3))
    with pytest.raises(ValueError):
        predict(m, np.zeros((2, 2)))
    mean, var = predict(m, np.zeros((0, 1)))
    assert mean.size == 0 and var.size == 0


def test_variance_clamping_reported():
    m = fit(sine_data(0, 40), 5, 0.5, config=FitConfig(max_iterations=3))
    bad = GPModel(m.kernel, m.alpha, m.inducing, m.standardization, m.weights, m.covariance_factor * 1e6,
                  m.chol_factor, m.diagnostics, m.solver)
    _, var, info = predict(bad, m.inducing.Z, return_info=True)
    assert info["clamped"] > 0
    assert np.all(var > 0)


def test_serialization_round_trip(tmp_path):
    m = fit(sine_data(1, 60), 8, 0.6, config=FitConfig(max_iterations=20))
    path = tmp_path / "m.json"
    m.save(path)
    loaded = GPModel.load(path)
    assert loaded.dumps() == m.dumps()
    doc = json.loads(path.read_text())
    assert doc["format"] == "renyigp-model/1"
    assert len(doc["hyperparams_original"]["lengthscale"]) == 1
    X = np.linspace(-3, 3, 11)
    np.testing.assert_array_equal(predict(loaded, X)[0], predict(m, X)[0])
    doc["format"] = "other/9"
    with pytest.raises(ValueError):
        GPModel.from_dict(doc)


def test_select_alpha_rules():
    d = sine_data(0, 60)
    cfg = FitConfig(max_iterations=15)
    best, table = select_alpha(d, [0.3], 8, config=cfg)
    assert best.value == 0.3 and len(table) == 1
    best2, table2 = select_alpha(d, [0.2, 0.7], 8, config=cfg)
    again, _ = select_alpha(d, [0.2, 0.7], 8, config=cfg)
    assert best2.value == again.value
    assert all(r["rmse"] >= 0 for r in table2)
    _, folds = select_alpha(d, [0.2], 8, config=cfg, folds=3)
    assert folds[0]["rmse"] is not None
    assert argmin_alpha([{"alpha": 0.6, "rmse": 1.0}, {"alpha": 0.4, "rmse": 1.0 + 5e-13}]) == 0.4
    with pytest.raises(ValueError):
        select_alpha(d, [], 8)
    with pytest.raises(ValueError):
        select_alpha(d, [1.0], 8)


def test_fit_with_cv_alpha():
    m = fit(sine_data(0, 60), 8, "cv", config=FitConfig(max_iterations=10), alpha_grid=[0.3, 0.6])
    assert m.alpha in (0.3, 0.6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_prediction_variance_positive_property(seed):
    d = sine_data(seed, 30)
    m = fit(d, 5, 0.5, config=FitConfig(max_iterations=5))
    _, var = predict(m, np.linspace(-4, 4, 7))
    assert np.all(var > 0)
