"""Exact references for the smoothers.

Two independent linear-Gaussian routes (recursive Kalman/RTS and a dense
precision-matrix solve), exact finite-HMM smoothing by forward-backward and
by path enumeration, and the asymptotic variance of the path-space
estimator on an i.i.d. model.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import integrate

from .errors import CapacityError, NumericalError
from .functionals import AdditiveFunctional
from .models import FiniteHMM, LinearGaussianModel

__all__ = [
    "GaussianBelief",
    "KalmanFilterOutput",
    "KalmanSmootherOutput",
    "kalman_filter",
    "rts_smoother",
    "kalman_smoother",
    "exact_additive_functionals",
    "lgssm_exact_functionals",
    "dense_joint_gaussian",
    "hmm_forward_backward",
    "hmm_enumerate",
    "hmm_exact_smoothed_functional",
    "iid_path_variance",
    "oracle_record",
]

ENUMERATION_LIMIT = 10**7


@dataclass(frozen=True)
class GaussianBelief:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError("variance must be nonnegative")


@dataclass(frozen=True)
class KalmanFilterOutput:
    predicted_means: np.ndarray
    predicted_vars: np.ndarray
    filtered_means: np.ndarray
    filtered_vars: np.ndarray
    loglik: float

    def belief(self, k: int) -> GaussianBelief:
        return GaussianBelief(float(self.filtered_means[k]), float(self.filtered_vars[k]))


@dataclass(frozen=True)
class KalmanSmootherOutput:
    filtered_means: np.ndarray
    filtered_vars: np.ndarray
    smoothed_means: np.ndarray
    smoothed_vars: np.ndarray
    lag_one_covs: np.ndarray  # entry k-1 holds Cov(X_k, X_{k-1} | y_{0:n}), k = 1..n
    loglik: float


def kalman_filter(model: LinearGaussianModel, ys) -> KalmanFilterOutput:
    model.theta  # rejects degenerate noise levels
    ys = np.asarray(ys, dtype=float)
    n1 = ys.size
    phi, sv2, c, sw2 = model.phi, model.sigma_v**2, model.c, model.sigma_w**2
    mp = np.empty(n1)
    pp = np.empty(n1)
    mf = np.empty(n1)
    pf = np.empty(n1)
    loglik = 0.0
    m, p = 0.0, model.sigma0**2
    for k in range(n1):
        if k > 0:
            m, p = phi * mf[k - 1], phi * phi * pf[k - 1] + sv2
        mp[k], pp[k] = m, p
        s = c * c * p + sw2
        gain = p * c / s
        resid = ys[k] - c * m
        loglik += -0.5 * (math.log(2.0 * math.pi * s) + resid * resid / s)
        mf[k] = m + gain * resid
        pf[k] = (1.0 - gain * c) * p
    return KalmanFilterOutput(mp, pp, mf, pf, float(loglik))


def rts_smoother(filt: KalmanFilterOutput, model: LinearGaussianModel) -> KalmanSmootherOutput:
    n1 = filt.filtered_means.size
    ms = filt.filtered_means.copy()
    ps = filt.filtered_vars.copy()
    lag1 = np.empty(max(n1 - 1, 0))
    for k in range(n1 - 1, 0, -1):
        g = filt.filtered_vars[k - 1] * model.phi / filt.predicted_vars[k]
        ms[k - 1] = filt.filtered_means[k - 1] + g * (ms[k] - filt.predicted_means[k])
        ps[k - 1] = filt.filtered_vars[k - 1] + g * g * (ps[k] - filt.predicted_vars[k])
        lag1[k - 1] = g * ps[k]
    return KalmanSmootherOutput(filt.filtered_means, filt.filtered_vars, ms, ps, lag1, filt.loglik)


def kalman_smoother(model: LinearGaussianModel, ys) -> KalmanSmootherOutput:
    return rts_smoother(kalman_filter(model, ys), model)


def exact_additive_functionals(out: KalmanSmootherOutput) -> np.ndarray:
    """Exact smoothed sums of x_{k-1}^2, x_{k-1} and x_{k-1} x_k over k = 1..n."""
    m, p, c = out.smoothed_means, out.smoothed_vars, out.lag_one_covs
    s1 = np.sum(p[:-1] + m[:-1] ** 2)
    s2 = np.sum(m[:-1])
    s3 = np.sum(c + m[1:] * m[:-1])
    return np.array([s1, s2, s3])


def lgssm_exact_functionals(model: LinearGaussianModel, ys, checkpoints) -> np.ndarray:
    """Exact benchmark functionals at each checkpoint (smoothing on each prefix)."""
    ys = np.asarray(ys, dtype=float)
    return np.array([exact_additive_functionals(kalman_smoother(model, ys[: t + 1])) for t in checkpoints])


@dataclass(frozen=True)
class DenseGaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    loglik: float


def dense_joint_gaussian(model: LinearGaussianModel, ys, max_n: int = 2000) -> DenseGaussianPosterior:
    """Posterior of X_{0:n} | y_{0:n} by assembling and inverting the joint precision."""
    model.theta
    ys = np.asarray(ys, dtype=float)
    n1 = ys.size
    if n1 - 1 > max_n:
        raise CapacityError(f"dense solve limited to n <= {max_n}")
    phi, sv2, c, sw2, s02 = model.phi, model.sigma_v**2, model.c, model.sigma_w**2, model.sigma0**2
    prec = np.zeros((n1, n1))
    prec[0, 0] = 1.0 / s02
    for k in range(1, n1):
        prec[k, k] += 1.0 / sv2
        prec[k - 1, k - 1] += phi * phi / sv2
        prec[k, k - 1] -= phi / sv2
        prec[k - 1, k] -= phi / sv2
    prior_prec = prec.copy()
    prec[np.diag_indices(n1)] += c * c / sw2
    h = c * ys / sw2
    try:
        factor = scipy.linalg.cho_factor(prec, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"posterior precision is not positive definite: {exc}") from None
    cov = scipy.linalg.cho_solve(factor, np.eye(n1))
    mean = scipy.linalg.cho_solve(factor, h)
    # log p(y) = log p(x, y) - log p(x | y) evaluated at the posterior mean
    logdet_post_prec = 2.0 * np.sum(np.log(np.diag(factor[0])))
    prior_chol = np.linalg.cholesky(prior_prec)
    logdet_prior_prec = 2.0 * np.sum(np.log(np.diag(prior_chol)))
    resid = ys - c * mean
    log_joint = (
        0.5 * logdet_prior_prec
        - 0.5 * mean @ prior_prec @ mean
        - 0.5 * np.sum(resid * resid) / sw2
        - 0.5 * n1 * math.log(sw2)
        - n1 * math.log(2.0 * math.pi)
    )
    log_post = 0.5 * logdet_post_prec - 0.5 * n1 * math.log(2.0 * math.pi)
    return DenseGaussianPosterior(mean, cov, float(log_joint - log_post))


@dataclass(frozen=True)
class HMMSmoothing:
    filtered: np.ndarray
    smoothed: np.ndarray
    pairwise: np.ndarray  # (n, K, K): p(x_{k-1} = i, x_k = j | y_{0:n}) for k = 1..n
    loglik: float


def hmm_forward_backward(hmm: FiniteHMM, ys) -> HMMSmoothing:
    ys = np.asarray(ys, dtype=np.int64)
    n1, k = ys.size, hmm.n_states
    trans, emis = hmm.transition, hmm.emission
    alpha = np.empty((n1, k))
    scale = np.empty(n1)
    a = hmm.initial * emis[:, ys[0]]
    for t in range(n1):
        if t > 0:
            a = (alpha[t - 1] @ trans) * emis[:, ys[t]]
        scale[t] = a.sum()
        if scale[t] <= 0:
            raise NumericalError(f"observation {t} has zero probability")
        alpha[t] = a / scale[t]
    beta = np.ones(k)
    smoothed = np.empty((n1, k))
    pairwise = np.empty((max(n1 - 1, 0), k, k))
    smoothed[-1] = alpha[-1]
    for t in range(n1 - 1, 0, -1):
        eb = emis[:, ys[t]] * beta
        xi = alpha[t - 1][:, None] * trans * eb[None, :]
        pairwise[t - 1] = xi / xi.sum()
        beta = trans @ eb / scale[t]
        smoothed[t - 1] = pairwise[t - 1].sum(axis=1)
    return HMMSmoothing(alpha, smoothed, pairwise, float(np.sum(np.log(scale))))


def _path_functional_fb(hmm, ys, func):
    fb = hmm_forward_backward(hmm, ys)
    k = hmm.n_states
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    total = fb.smoothed[0] @ func.initial(np.arange(k), ys[0]).reshape(k, func.m)
    for t in range(1, len(ys)):
        s = func.step(i, j, ys[t])
        total = total + np.einsum("ij,ijm->m", fb.pairwise[t - 1], s)
    return total


def hmm_enumerate(hmm: FiniteHMM, ys, func: AdditiveFunctional, chunk: int = 1 << 16) -> np.ndarray:
    """Exact smoothed functional by summing over every state path."""
    ys = np.asarray(ys, dtype=np.int64)
    n1, k = ys.size, hmm.n_states
    total_paths = k**n1
    if total_paths > ENUMERATION_LIMIT:
        raise CapacityError(f"{total_paths} paths exceed the enumeration limit {ENUMERATION_LIMIT}")
    log_terms = []
    values = []
    for start in range(0, total_paths, chunk):
        idx = np.arange(start, min(start + chunk, total_paths))
        paths = np.stack(np.unravel_index(idx, (k,) * n1), axis=1)
        lp = hmm.log_initial(paths[:, 0]) + hmm.log_observation(ys[0], paths[:, 0])
        val = func.initial(paths[:, 0], ys[0]).reshape(len(idx), func.m)
        for t in range(1, n1):
            lp = lp + hmm.log_transition(paths[:, t - 1], paths[:, t]) + hmm.log_observation(ys[t], paths[:, t])
            val = val + func.step(paths[:, t - 1], paths[:, t], ys[t])
        log_terms.append(lp)
        values.append(val)
    lp = np.concatenate(log_terms)
    val = np.concatenate(values)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    return w @ val


def hmm_exact_smoothed_functional(hmm: FiniteHMM, ys, func: AdditiveFunctional, method: str = "auto") -> np.ndarray:
    """Exact smoothed additive functional for a finite HMM.

    ``method`` is ``"enumerate"``, ``"forward_backward"`` or ``"auto"``
    (enumeration when the path count is within the guard).
    """
    if method == "auto":
        method = "enumerate" if hmm.n_states ** len(ys) <= ENUMERATION_LIMIT else "forward_backward"
    if method == "enumerate":
        return hmm_enumerate(hmm, ys, func)
    if method == "forward_backward":
        return _path_functional_fb(hmm, ys, func)
    raise ValueError(f"unknown method {method!r}")


def _quad(fn, lo, hi):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(fn, lo, hi, limit=200, epsabs=0.0, epsrel=1e-11)
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature did not converge: {exc}") from None
    if not math.isfinite(val):
        raise NumericalError("quadrature returned a non-finite value")
    return val


def iid_path_variance(mu, g, s, y, n: int, lower: float, upper: float, tail_tol: float = 1e-10) -> float:
    """Asymptotic variance of the path-space estimator when X_k are i.i.d. ~ mu.

    ``mu(x)`` is the state density, ``g(y, x)`` the observation density and
    ``s(x)`` the per-step statistic; every observation equals ``y``.  The
    integrals are taken over ``[lower, upper]`` after checking that the mass
    of mu and of the posterior outside it is below ``tail_tol``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    post = lambda x: mu(x) * g(y, x)
    z = _quad(post, lower, upper)
    if not z > 0:
        raise NumericalError("posterior normaliser vanishes on the truncation interval")
    for dens, norm, name in ((mu, 1.0, "mu"), (post, z, "posterior")):
        tail = (_quad(dens, -np.inf, lower) + _quad(dens, upper, np.inf)) / norm
        if tail > tail_tol:
            raise NumericalError(f"{name} puts mass {tail:.3g} outside [{lower}, {upper}]")
    s_mean = _quad(lambda x: s(x) * post(x), lower, upper) / z
    s_tilde = lambda x: s(x) - s_mean
    first = _quad(lambda x: mu(x) * (g(y, x) * s_tilde(x)) ** 2, lower, upper) / z**2
    ratio = _quad(lambda x: mu(x) * g(y, x) ** 2, lower, upper) / z**2
    spread = _quad(lambda x: s_tilde(x) ** 2 * post(x), lower, upper) / z
    return float(n * first + 0.5 * n * (n - 1) * ratio * spread)


def _digest(obj) -> str:
    return hashlib.sha256(obj).hexdigest()[:16]


def oracle_record(model, ys, values: dict) -> dict:
    """JSON-ready record keyed by model hash, parameters and data hash."""
    spec = model.to_spec()
    return {
        "model_hash": _digest(json.dumps(spec, sort_keys=True).encode()),
        "theta": spec["params"],
        "data_hash": _digest(np.ascontiguousarray(ys).tobytes()),
        "n": int(len(ys) - 1),
        "values": {k: np.asarray(v).tolist() for k, v in values.items()},
    }


__all__ += ["DenseGaussianPosterior", "HMMSmoothing"]
