"""Exact references, checked against each other and against closed forms."""

import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from fwdsmooth.errors import CapacityError, NumericalError
from fwdsmooth.functionals import AdditiveFunctional, constant_functional
from fwdsmooth.models import FiniteHMM, LinearGaussianModel, simulate
from fwdsmooth.oracle import (
    GaussianBelief,
    dense_joint_gaussian,
    exact_additive_functionals,
    hmm_enumerate,
    hmm_exact_smoothed_functional,
    hmm_forward_backward,
    iid_path_variance,
    kalman_filter,
    kalman_smoother,
    lgssm_exact_functionals,
    oracle_record,
    rts_smoother,
)

lgssm_params = st.tuples(
    st.floats(-0.98, 0.98),
    st.floats(0.05, 3.0),
    st.floats(-2.0, 2.0),
    st.floats(0.05, 3.0),
)


def random_lgssm(rng):
    return LinearGaussianModel(rng.uniform(-0.95, 0.95), rng.uniform(0.1, 2), rng.uniform(-2, 2), rng.uniform(0.1, 2))


# -- Kalman filter ------------------------------------------------------------


def test_single_conjugate_update():
    m = LinearGaussianModel(0.5, 1.0, 1.0, 1.0, sigma0=1.0)
    out = kalman_filter(m, np.array([1.7]))
    assert out.filtered_means[0] == pytest.approx(0.85, abs=1e-15)
    assert out.filtered_vars[0] == pytest.approx(0.5, abs=1e-15)


def test_uninformative_observations_leave_prior_moments():
    m = LinearGaussianModel(0.7, 0.5, 0.0, 1.0, sigma0=2.0)
    _, ys = simulate(m, 40, 3)
    out = kalman_filter(m, ys)
    np.testing.assert_array_equal(out.filtered_means, out.predicted_means)
    np.testing.assert_array_equal(out.filtered_vars, out.predicted_vars)
    v = 4.0
    for k in range(41):
        assert out.filtered_vars[k] == pytest.approx(v, rel=1e-14)
        v = 0.49 * v + 0.25


def test_loglik_matches_marginal_gaussian():
    m = LinearGaussianModel(0.6, 0.8, 1.3, 0.7)
    _, ys = simulate(m, 12, 5)
    n1 = ys.size
    idx = np.arange(n1)
    lag = np.abs(idx[:, None] - idx[None, :])
    # Cov(X_j, X_k) = phi^|j-k| Var(X_min(j,k)); here sigma0 is stationary so Var is constant
    cov_x = m.stationary_variance() * m.phi**lag
    cov_y = m.c**2 * cov_x + m.sigma_w**2 * np.eye(n1)
    sign, logdet = np.linalg.slogdet(cov_y)
    direct = -0.5 * (logdet + ys @ np.linalg.solve(cov_y, ys) + n1 * math.log(2 * math.pi))
    assert kalman_filter(m, ys).loglik == pytest.approx(direct, rel=1e-12)


def test_kalman_matches_dense_on_thirty_instances():
    rng = np.random.default_rng(11)
    for _ in range(30):
        m = random_lgssm(rng)
        _, ys = simulate(m, 30, rng)
        kf = kalman_filter(m, ys)
        # the filtered marginal at k is the smoothed marginal of the prefix y_{0:k}
        for k in (0, 7, 30):
            dn = dense_joint_gaussian(m, ys[: k + 1])
            assert abs(kf.filtered_means[k] - dn.mean[k]) < 1e-10
            assert abs(kf.filtered_vars[k] - dn.cov[k, k]) < 1e-10


def test_gaussian_belief_rejects_negative_variance():
    with pytest.raises(ValueError):
        GaussianBelief(0.0, -1.0)
    assert kalman_filter(LinearGaussianModel(0.5, 1, 1, 1), np.zeros(3)).belief(2).variance > 0


# -- RTS smoother ---------------------------------------------------------------


def test_smoothed_equals_filtered_at_endpoint():
    m = LinearGaussianModel(0.9, 0.3, 1.0, 0.5)
    _, ys = simulate(m, 50, 1)
    out = kalman_smoother(m, ys)
    assert out.smoothed_means[-1] == out.filtered_means[-1]
    assert out.smoothed_vars[-1] == out.filtered_vars[-1]


def test_rts_matches_dense_including_lag_one():
    rng = np.random.default_rng(12)
    for _ in range(30):
        m = random_lgssm(rng)
        _, ys = simulate(m, 30, rng)
        ks = rts_smoother(kalman_filter(m, ys), m)
        dn = dense_joint_gaussian(m, ys)
        np.testing.assert_allclose(ks.smoothed_means, dn.mean, atol=1e-9, rtol=0)
        np.testing.assert_allclose(ks.smoothed_vars, np.diag(dn.cov), atol=1e-9, rtol=0)
        np.testing.assert_allclose(ks.lag_one_covs, np.diag(dn.cov, -1), atol=1e-9, rtol=0)
        assert ks.loglik == pytest.approx(dn.loglik, abs=1e-9)


def test_near_uninformative_observations_recover_prior_variance():
    m = LinearGaussianModel(0.8, 0.5, 1.0, 1e6, sigma0=1.3)
    _, ys = simulate(m, 25, 2)
    out = kalman_smoother(m, ys)
    assert out.smoothed_vars[0] == pytest.approx(1.3**2, rel=1e-3)


@given(lgssm_params, st.integers(0, 2**31 - 1))
def test_smoothing_never_increases_variance(params, seed):
    m = LinearGaussianModel(*params)
    _, ys = simulate(m, 20, seed)
    out = kalman_smoother(m, ys)
    assert np.all(out.smoothed_vars <= out.filtered_vars + 1e-12)
    assert np.all(out.smoothed_vars > 0)


# -- exact additive functionals -------------------------------------------------


def test_functionals_single_step_without_information():
    m = LinearGaussianModel(0.6, 0.4, 0.0, 1.0, sigma0=1.5)
    s1, s2, s3 = exact_additive_functionals(kalman_smoother(m, np.array([0.3, -2.0])))
    assert s2 == pytest.approx(0.0, abs=1e-15)
    assert s3 == pytest.approx(0.6 * 1.5**2, rel=1e-14)
    assert s1 == pytest.approx(1.5**2, rel=1e-14)


def test_functionals_against_joint_gaussian_monte_carlo():
    m = LinearGaussianModel(0.8, 0.5, 1.0, 1.0)
    _, ys = simulate(m, 10, 9)
    exact = exact_additive_functionals(kalman_smoother(m, ys))
    dn = dense_joint_gaussian(m, ys)
    chol = np.linalg.cholesky(dn.cov)
    rng = np.random.default_rng(10)
    n_total, chunk = 10**7, 10**6
    sums = np.zeros(3)
    sq = np.zeros(3)
    for _ in range(n_total // chunk):
        x = dn.mean + rng.standard_normal((chunk, 11)) @ chol.T
        vals = np.column_stack([(x[:, :-1] ** 2).sum(1), x[:, :-1].sum(1), (x[:, :-1] * x[:, 1:]).sum(1)])
        sums += vals.sum(0)
        sq += (vals**2).sum(0)
    mean = sums / n_total
    se = np.sqrt((sq / n_total - mean**2) / n_total)
    assert np.all(np.abs(mean - exact) < 3 * se), (mean, exact, se)


def test_prefix_functionals_match_direct_calls():
    m = LinearGaussianModel(0.8, 0.1, 1.0, 1.0)
    _, ys = simulate(m, 60, 3)
    got = lgssm_exact_functionals(m, ys, [10, 60])
    np.testing.assert_array_equal(got[1], exact_additive_functionals(kalman_smoother(m, ys)))
    np.testing.assert_array_equal(got[0], exact_additive_functionals(kalman_smoother(m, ys[:11])))


# -- dense joint Gaussian -----------------------------------------------------


def test_dense_without_data_is_prior_ar1():
    m = LinearGaussianModel(0.7, 0.5, 0.0, 1.0, sigma0=2.0)
    dn = dense_joint_gaussian(m, np.ones(6))
    np.testing.assert_allclose(dn.mean, 0.0, atol=1e-14)
    var = [4.0]
    for _ in range(5):
        var.append(0.49 * var[-1] + 0.25)
    var = np.array(var)
    np.testing.assert_allclose(np.diag(dn.cov), var, rtol=1e-12)
    np.testing.assert_allclose(np.diag(dn.cov, -1), 0.7 * var[:-1], rtol=1e-12)


@given(lgssm_params, st.integers(0, 2**31 - 1))
def test_dense_precision_is_positive_definite(params, seed):
    m = LinearGaussianModel(*params)
    _, ys = simulate(m, 15, seed)
    dn = dense_joint_gaussian(m, ys)
    np.linalg.cholesky(dn.cov)
    np.testing.assert_allclose(dn.cov, dn.cov.T, atol=1e-12)


def test_dense_solver_failure_is_numerical_error(monkeypatch):
    def broken(*a, **k):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(scipy.linalg, "cho_factor", broken)
    with pytest.raises(NumericalError):
        dense_joint_gaussian(LinearGaussianModel(0.5, 1, 1, 1), np.zeros(4))


def test_dense_size_guard():
    with pytest.raises(CapacityError):
        dense_joint_gaussian(LinearGaussianModel(0.5, 1, 1, 1), np.zeros(2002))


# -- finite HMM -----------------------------------------------------------------


def pair_functional():
    return AdditiveFunctional(
        2,
        lambda xp, x, y: np.stack(np.broadcast_arrays((xp == x) * 1.0, x * (y + 1.0) - xp), axis=-1),
        lambda x0, y0: np.stack(np.broadcast_arrays(x0 * 1.0, x0 * 0.0 + y0), axis=-1),
    )


def random_hmm(rng, k, m):
    return FiniteHMM(rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k), size=k), rng.dirichlet(np.ones(m), size=k))


def test_single_state_hmm_is_deterministic():
    hmm = FiniteHMM([1.0], [[1.0]], [[0.3, 0.7]])
    ys = np.array([0, 1, 1, 0, 1])
    f = AdditiveFunctional(1, lambda xp, x, y: (2.0 * y + xp + 1.0)[..., None])
    expected = sum(2.0 * y + 1.0 for y in ys[1:])
    for method in ("enumerate", "forward_backward"):
        assert hmm_exact_smoothed_functional(hmm, ys, f, method)[0] == pytest.approx(expected, abs=1e-12)


def test_uniform_hmm_gives_uniform_pairwise():
    k = 3
    hmm = FiniteHMM(np.full(k, 1 / k), np.full((k, k), 1 / k), np.full((k, 2), 0.5))
    ys = np.array([0, 1, 0, 0, 1])
    fb = hmm_forward_backward(hmm, ys)
    np.testing.assert_allclose(fb.pairwise, 1 / k**2, atol=1e-15)
    f = pair_functional()
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    expected = sum(f.step(i, j, y).reshape(-1, 2).mean(0) for y in ys[1:]) + f.initial(np.arange(k), ys[0]).mean(0)
    np.testing.assert_allclose(hmm_exact_smoothed_functional(hmm, ys, f), expected, atol=1e-12)


def test_forward_backward_equals_enumeration():
    rng = np.random.default_rng(4)
    hmm = random_hmm(rng, 2, 3)
    _, ys = simulate(hmm, 8, 4)
    f = pair_functional()
    e = hmm_exact_smoothed_functional(hmm, ys, f, "enumerate")
    b = hmm_exact_smoothed_functional(hmm, ys, f, "forward_backward")
    np.testing.assert_allclose(e, b, atol=1e-12, rtol=0)


def test_forward_backward_loglik_equals_path_sum():
    rng = np.random.default_rng(5)
    hmm = random_hmm(rng, 3, 2)
    _, ys = simulate(hmm, 6, 5)
    paths = np.stack(np.unravel_index(np.arange(3**7), (3,) * 7), axis=1)
    lp = hmm.log_initial(paths[:, 0]) + hmm.log_observation(ys[0], paths[:, 0])
    for t in range(1, 7):
        lp = lp + hmm.log_transition(paths[:, t - 1], paths[:, t]) + hmm.log_observation(ys[t], paths[:, t])
    assert hmm_forward_backward(hmm, ys).loglik == pytest.approx(np.logaddexp.reduce(lp), rel=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_pairwise_marginals_are_normalised(k, m, n, seed):
    rng = np.random.default_rng(seed)
    hmm = random_hmm(rng, k, m)
    _, ys = simulate(hmm, n, rng)
    fb = hmm_forward_backward(hmm, ys)
    np.testing.assert_allclose(fb.pairwise.sum(axis=(1, 2)), 1.0, atol=1e-12)
    np.testing.assert_allclose(fb.smoothed.sum(axis=1), 1.0, atol=1e-12)
    # marginal consistency between consecutive pairwise tables
    np.testing.assert_allclose(fb.pairwise.sum(axis=2)[1:], fb.pairwise.sum(axis=1)[:-1], atol=1e-12)


@given(st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_exact_functional_is_linear(alpha, seed):
    rng = np.random.default_rng(seed)
    hmm = random_hmm(rng, 3, 2)
    _, ys = simulate(hmm, 9, rng)
    f = pair_functional()
    base = hmm_exact_smoothed_functional(hmm, ys, f, "forward_backward")
    scaled = hmm_exact_smoothed_functional(hmm, ys, f.scaled(alpha), "forward_backward")
    np.testing.assert_allclose(scaled, alpha * base, atol=1e-12 * max(1.0, np.abs(base).max()))


def test_enumeration_size_guard():
    hmm = FiniteHMM([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])
    ys = np.zeros(24, dtype=int)
    with pytest.raises(CapacityError):
        hmm_enumerate(hmm, ys, constant_functional())
    # auto falls back to forward-backward beyond the guard
    assert hmm_exact_smoothed_functional(hmm, ys, constant_functional())[0] == pytest.approx(23.0)


def test_impossible_observation_is_numerical_error():
    hmm = FiniteHMM([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(NumericalError):
        hmm_forward_backward(hmm, np.array([0, 1]))


# -- i.i.d. path-space variance ----------------------------------------------


def gauss_iid(y, n, s=lambda x: x):
    return iid_path_variance(norm.pdf, lambda y, x: norm.pdf(y - x), s, y, n, -40.0, 40.0)


def test_constant_statistic_has_zero_variance():
    assert gauss_iid(0.7, 30, lambda x: 3.0 + 0.0 * x) == pytest.approx(0.0, abs=1e-12)


def test_single_step_has_no_quadratic_term():
    # pi = N(y/2, 1/2), s(x) = x: first term = int pi^2 (x - y/2)^2 / mu
    y = 0.4
    direct = scipy_first_term(y)
    assert gauss_iid(y, 1) == pytest.approx(direct, rel=1e-9)


def scipy_first_term(y):
    from scipy import integrate

    z = norm.pdf(y, scale=math.sqrt(2.0))
    fn = lambda x: (norm.pdf(x) * norm.pdf(y - x) / z) ** 2 * (x - y / 2) ** 2 / norm.pdf(x)
    return integrate.quad(fn, -20, 20, epsabs=0, epsrel=1e-12)[0]


def test_variance_grows_quadratically():
    ratio = gauss_iid(1.0, 200) / gauss_iid(1.0, 100)
    assert abs(ratio / 4.0 - 1.0) < 0.05


def test_closed_form_gaussian_case():
    # mu = N(0,1), g = N(y; x, 1): pi = N(y/2, 1/2) and all integrals are Gaussian
    y, n = 1.0, 7
    # int pi^2/mu = (1/(2 pi)) * sqrt(2 pi / 3) * exp(y^2/3) / Z^2 with Z = N(y; 0, 2) ... checked numerically
    from scipy import integrate

    z = norm.pdf(y, scale=math.sqrt(2.0))
    pi = lambda x: norm.pdf(x) * norm.pdf(y - x) / z
    b = integrate.quad(lambda x: pi(x) ** 2 / norm.pdf(x), -20, 20, epsrel=1e-12)[0]
    a = integrate.quad(lambda x: pi(x) ** 2 * (x - y / 2) ** 2 / norm.pdf(x), -20, 20, epsrel=1e-12)[0]
    assert gauss_iid(y, n) == pytest.approx(n * a + n * (n - 1) / 2 * b * 0.5, rel=1e-9)


def test_truncation_interval_too_narrow_is_rejected():
    with pytest.raises(NumericalError):
        iid_path_variance(norm.pdf, lambda y, x: norm.pdf(y - x), lambda x: x, 0.0, 5, -3.0, 3.0)


def test_heavy_ratio_fails_loudly():
    # mu lighter-tailed than pi^2: the ratio integrand is not integrable near the edges of the grid
    mu = lambda x: norm.pdf(x, scale=0.2)
    g = lambda y, x: np.exp(0.5 * (x / 0.2) ** 2) * norm.pdf(x, scale=3.0)
    with pytest.raises(NumericalError):
        iid_path_variance(mu, g, lambda x: x, 0.0, 5, -40.0, 40.0)


# -- records --------------------------------------------------------------------


def test_oracle_record_is_json_and_stable():
    m = LinearGaussianModel(0.8, 0.1, 1.0, 1.0)
    _, ys = simulate(m, 20, 0)
    vals = {"S": exact_additive_functionals(kalman_smoother(m, ys))}
    r1 = oracle_record(m, ys, vals)
    r2 = oracle_record(LinearGaussianModel(0.8, 0.1, 1.0, 1.0), ys.copy(), vals)
    assert r1 == r2
    assert json.loads(json.dumps(r1))["theta"]["phi"] == 0.8
    assert oracle_record(m, ys + 1e-9, vals)["data_hash"] != r1["data_hash"]
