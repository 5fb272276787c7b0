import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from approxmpc.gp import (
    GpHyperparams,
    GpModel,
    IllConditionedError,
    Standardizer,
    fit_alpha,
    gram,
    kernel_matrix,
    log_marginal_likelihood,
    nn_kernel,
    optimize_hyperparams,
    posterior_full,
    posterior_mean_fast,
)

D = 4


def _hyper(rng, d=D):
    return GpHyperparams(rng.uniform(0.2, 3.0), rng.uniform(0.05, 2.0, d + 1), rng.uniform(1e-4, 1e-2))


def _data(rng, n, d=D):
    X = rng.normal(size=(n, d))
    y = np.sin(X @ rng.normal(size=d)) + 0.01 * rng.normal(size=n)
    return X, y


def _kernel_oracle(a, b, hyper):
    # literal transcription with an explicit diagonal matrix
    at, bt = np.r_[1.0, a], np.r_[1.0, b]
    Lam = np.diag(hyper.lam)
    return hyper.s_f * math.asin(at @ Lam @ bt / math.sqrt((1 + 2 * at @ Lam @ at) * (1 + 2 * bt @ Lam @ bt)))


def test_hyperparams_validation_and_log_round_trip():
    with pytest.raises(ValueError):
        GpHyperparams(0.0, [1.0], 1e-3)
    with pytest.raises(ValueError):
        GpHyperparams(1.0, [1.0, -1.0], 1e-3)
    with pytest.raises(ValueError):
        GpHyperparams(1.0, [1.0], 0.0)
    h = GpHyperparams(2.0, [0.5, 1.5, 3.0], 1e-3)
    back = GpHyperparams.from_log_vector(h.to_log_vector())
    assert back.s_f == pytest.approx(2.0) and back.sigma2 == pytest.approx(1e-3)
    assert_allclose(back.lam, h.lam)
    assert GpHyperparams.from_dict(h.to_dict()) == h


def test_kernel_at_origin():
    h = GpHyperparams.default(D, s_f=2.5)
    assert nn_kernel(np.zeros(D), np.zeros(D), h) == pytest.approx(2.5 * math.asin(1 / 3), rel=1e-15)
    assert math.asin(1 / 3) == pytest.approx(0.3398, abs=1e-4)


def test_kernel_matches_oracle_and_matrix_form():
    rng = np.random.default_rng(0)
    h = _hyper(rng)
    A, B = rng.normal(size=(7, D)), rng.normal(size=(5, D))
    K = kernel_matrix(A, B, h)
    for i in range(7):
        for j in range(5):
            assert K[i, j] == pytest.approx(_kernel_oracle(A[i], B[j], h), rel=1e-13, abs=1e-15)
            assert nn_kernel(A[i], B[j], h) == pytest.approx(K[i, j], rel=1e-13, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kernel_diagonal_bound_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    h = _hyper(rng)
    a, b = rng.normal(scale=rng.uniform(0.1, 100), size=(2, D))
    assert nn_kernel(a, a, h) < h.s_f * math.pi / 6
    assert nn_kernel(a, b, h) == pytest.approx(nn_kernel(b, a, h), rel=1e-15)


def test_gram_psd_on_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        K = gram(rng.normal(scale=2.0, size=(n, D)), _hyper(rng))
        assert_allclose(K, K.T, atol=0)
        assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_gram_single_and_duplicate_point():
    h = GpHyperparams.default(D)
    x = np.array([[0.3, -0.2, 0.5, 0.1]])
    assert_allclose(gram(x, h), [[nn_kernel(x[0], x[0], h)]])
    K = gram(np.vstack([x, x]), h)
    assert np.linalg.matrix_rank(K, tol=1e-12) == 1
    np.linalg.cholesky(K + h.sigma2 * np.eye(2))


def test_fit_alpha_scalar_case():
    h = GpHyperparams.default(D, sigma2=0.01)
    x = np.array([[0.1, 0.2, -0.3, 0.4]])
    m = fit_alpha(x, [0.7], h)
    k = nn_kernel(x[0], x[0], h)
    assert m.alpha[0] == pytest.approx(0.7 / (k + 0.01), rel=1e-14)


def test_fit_alpha_residual_and_zero_labels():
    rng = np.random.default_rng(2)
    X, y = _data(rng, 80)
    h = _hyper(rng)
    m = fit_alpha(X, y, h)
    r = (gram(X, h) + h.sigma2 * np.eye(80)) @ m.alpha - y
    assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(y)
    assert np.all(fit_alpha(X, np.zeros(80), h).alpha == 0.0)
    with pytest.raises(ValueError):
        fit_alpha(X, y[:-1], h)


def test_ill_conditioned_error():
    x = np.array([[0.1, 0.2, 0.3, 0.4]] * 2)
    h = GpHyperparams(1.0, np.ones(D + 1), 1e-300)
    with pytest.raises(IllConditionedError):
        fit_alpha(x, [1.0, -1.0], h)


def test_fast_mean_equals_full_posterior():
    rng = np.random.default_rng(3)
    X, y = _data(rng, 200)
    m = fit_alpha(X, y, _hyper(rng), scaler="auto")
    Q = rng.normal(scale=1.5, size=(1000, D))
    for q in Q:
        full, _ = posterior_full(m, q)
        assert abs(posterior_mean_fast(m, q) - full) <= 1e-12 * (1 + abs(full))
    full = np.array([posterior_full(m, q)[0] for q in Q[:50]])
    assert_allclose(m.predict(Q[:50]), full, rtol=1e-12, atol=1e-12)


def test_fast_mean_zero_alpha():
    rng = np.random.default_rng(4)
    X, _ = _data(rng, 10)
    m = fit_alpha(X, np.zeros(10), GpHyperparams.default(D))
    assert posterior_mean_fast(m, rng.normal(size=D)) == 0.0


def test_single_point_interpolation_limit():
    x = np.array([[0.2, -0.1, 0.4, 0.3]])
    for s2 in (1e-2, 1e-6, 1e-10):
        h = GpHyperparams.default(D, sigma2=s2)
        k = nn_kernel(x[0], x[0], h)
        mean = posterior_mean_fast(fit_alpha(x, [1.3], h), x[0])
        assert mean == pytest.approx(1.3 * k / (k + s2), rel=1e-12)
    assert mean == pytest.approx(1.3, rel=1e-8)


def test_posterior_variance_properties():
    rng = np.random.default_rng(5)
    X, y = _data(rng, 30)
    h = _hyper(rng)
    m = fit_alpha(X, y, h)
    for x in X:
        _, var = posterior_full(m, x)
        assert 0.0 <= var <= h.sigma2 + 1e-8
        assert var <= nn_kernel(x, x, h)


def test_posterior_prior_when_uncorrelated():
    # orthogonal augmented vectors [1, 1, 0, 0, 0] and [1, -1, 0, 0, 0] give k_* = 0
    h2 = GpHyperparams(1.0, [1.0, 1.0, 1.0, 1.0, 1.0], 1e-3)
    m2 = fit_alpha(np.array([[1.0, 0, 0, 0]]), [2.0], h2)
    q2 = np.array([-1.0, 0, 0, 0])
    mean, var = posterior_full(m2, q2)
    assert mean == 0.0
    assert var == pytest.approx(nn_kernel(q2, q2, h2), rel=1e-14)


def test_adding_point_never_increases_variance():
    rng = np.random.default_rng(6)
    for _ in range(20):
        h = _hyper(rng)
        X, y = _data(rng, 15)
        q = rng.normal(size=D)
        v1 = posterior_full(fit_alpha(X[:-1], y[:-1], h), q)[1]
        v2 = posterior_full(fit_alpha(X, y, h), q)[1]
        assert v2 <= v1 + 1e-12


def test_prediction_continuous_along_slice():
    rng = np.random.default_rng(7)
    X, y = _data(rng, 60)
    m = fit_alpha(X, y, _hyper(rng), scaler="auto")
    t = np.linspace(-3, 3, 2001)
    Q = np.zeros((t.size, D))
    Q[:, 1] = t
    f = m.predict(Q)
    jumps = np.abs(np.diff(f))
    # a smooth function sampled finely changes by small, evenly sized steps
    assert jumps.max() <= 50 * np.median(jumps) + 1e-9


def test_lml_scalar_case():
    h = GpHyperparams.default(D, sigma2=0.05)
    x = np.array([[0.3, 0.1, -0.2, 0.5]])
    c = nn_kernel(x[0], x[0], h) + 0.05
    y = 0.8
    expected = -y**2 / (2 * c) - 0.5 * math.log(c) - 0.5 * math.log(2 * math.pi)
    assert log_marginal_likelihood(x, [y], h) == pytest.approx(expected, rel=1e-13)


def test_lml_matches_dense_formula_and_is_permutation_invariant():
    rng = np.random.default_rng(8)
    X, y = _data(rng, 40)
    h = _hyper(rng)
    C = gram(X, h) + h.sigma2 * np.eye(40)
    _, logdet = np.linalg.slogdet(C)
    dense = -0.5 * y @ np.linalg.solve(C, y) - 0.5 * logdet - 20 * math.log(2 * math.pi)
    assert log_marginal_likelihood(X, y, h) == pytest.approx(dense, rel=1e-9)
    p = rng.permutation(40)
    assert log_marginal_likelihood(X[p], y[p], h) == pytest.approx(dense, rel=1e-9)


def test_optimizer_improves_and_is_deterministic():
    rng = np.random.default_rng(9)
    X, y = _data(rng, 60)
    h0 = GpHyperparams.default(D)
    h1 = optimize_hyperparams(X, y, h0, seed=3, restarts=2, maxfev=200)
    assert log_marginal_likelihood(X, y, h1) >= log_marginal_likelihood(X, y, h0)
    assert optimize_hyperparams(X, y, h0, seed=3, restarts=2, maxfev=200) == h1
    p = rng.permutation(60)
    assert optimize_hyperparams(X[p], y[p], h0, seed=3, restarts=2, maxfev=200) == h1


def test_optimizer_zero_labels_shrinks_signal():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(30, D))
    h = optimize_hyperparams(X, np.zeros(30), GpHyperparams.default(D, sigma2=1e-2), restarts=3, maxfev=500)
    assert h.s_f < 1e-3
    noise_only = GpHyperparams(1e-12 + 1e-6, h.lam, h.sigma2)
    assert log_marginal_likelihood(X, np.zeros(30), h) >= log_marginal_likelihood(X, np.zeros(30), noise_only) - 1e-3


def test_optimizer_on_gp_sample_reaches_true_lml():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(50, 2))
    true = GpHyperparams(1.5, [0.5, 1.0, 0.3], 1e-3)
    C = gram(X, true) + true.sigma2 * np.eye(50)
    y = np.linalg.cholesky(C) @ rng.normal(size=50)
    h = optimize_hyperparams(X, y, GpHyperparams.default(2), restarts=5, maxfev=500)
    assert log_marginal_likelihood(X, y, h) >= log_marginal_likelihood(X, y, true) - 1e-3


def test_optimizer_rejects_empty():
    with pytest.raises(ValueError):
        optimize_hyperparams(np.zeros((0, D)), [], GpHyperparams.default(D))


def test_standardizer():
    rng = np.random.default_rng(12)
    X = rng.normal(3.0, 2.0, size=(100, 3))
    X[:, 2] = 5.0
    s = Standardizer.fit(X)
    Z = s(X)
    assert_allclose(Z[:, :2].mean(axis=0), 0, atol=1e-12)
    assert_allclose(Z[:, :2].std(axis=0), 1, atol=1e-12)
    assert_allclose(Z[:, 2], 0)


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    X, y = _data(rng, 25)
    m = fit_alpha(X, y, _hyper(rng), output_index=1, scaler="auto")
    m.save(tmp_path / "m.json")
    back = GpModel.load(tmp_path / "m.json")
    assert back.output_index == 1 and back.hyper == m.hyper
    assert_allclose(back.alpha, m.alpha, rtol=0, atol=0)
    q = rng.normal(size=D)
    assert posterior_mean_fast(back, q) == posterior_mean_fast(m, q)


def test_model_file_version_check(tmp_path):
    rng = np.random.default_rng(14)
    X, y = _data(rng, 3)
    d = fit_alpha(X, y, GpHyperparams.default(D)).to_dict()
    d["format_version"] = 99
    with pytest.raises(ValueError):
        GpModel.from_dict(d)
    d["format_version"] = 1
    d["alpha"] = d["alpha"][:-1]
    with pytest.raises(ValueError):
        GpModel.from_dict(d)
