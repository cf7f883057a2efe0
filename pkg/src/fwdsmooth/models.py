"""State-space models: the abstract interface and the three concrete models.

All density methods are vectorised over numpy arrays and broadcast their
arguments.  Gradients are taken with respect to the model parameter vector
``theta`` and carry a trailing axis of length ``d``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ParameterDomainError
from .rng import as_generator

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "Constraint",
    "ModelParams",
    "StateSpaceModel",
    "LinearGaussianModel",
    "StochasticVolatilityModel",
    "FiniteHMM",
    "simulate",
    "model_from_spec",
    "load_model",
]


@dataclass(frozen=True)
class Constraint:
    """Domain of one scalar parameter.

    ``kind`` is one of ``"real"``, ``"positive"`` or ``"interval"`` (open
    interval ``(lower, upper)``).
    """

    kind: str = "real"
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if self.kind not in ("real", "positive", "interval"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "interval" and not self.lower < self.upper:
            raise ValueError("interval constraint needs lower < upper")

    def admits(self, v: float) -> bool:
        if not math.isfinite(v):
            return False
        if self.kind == "positive":
            return v > 0.0
        if self.kind == "interval":
            return self.lower < v < self.upper
        return True

    def to_unconstrained(self, v):
        if self.kind == "positive":
            return np.log(v)
        if self.kind == "interval":
            mid = 0.5 * (self.lower + self.upper)
            half = 0.5 * (self.upper - self.lower)
            return np.arctanh((v - mid) / half)
        return v

    def from_unconstrained(self, u):
        if self.kind == "positive":
            return np.exp(u)
        if self.kind == "interval":
            mid = 0.5 * (self.lower + self.upper)
            half = 0.5 * (self.upper - self.lower)
            return mid + half * np.tanh(u)
        return u

    def derivative(self, v):
        """d(value)/d(unconstrained), expressed in terms of the value."""
        if self.kind == "positive":
            return v
        if self.kind == "interval":
            mid = 0.5 * (self.lower + self.upper)
            half = 0.5 * (self.upper - self.lower)
            t = (v - mid) / half
            return half * (1.0 - t * t)
        return 1.0


REAL = Constraint()
POSITIVE = Constraint("positive", 0.0)
UNIT_INTERVAL = Constraint("interval", -1.0, 1.0)


@dataclass(frozen=True)
class ModelParams:
    """Named, constrained parameter vector."""

    names: tuple[str, ...]
    values: np.ndarray
    constraints: tuple[Constraint, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not (len(self.names) == values.size == len(self.constraints)):
            raise ValueError("names, values and constraints must have equal length")
        for name, v, c in zip(self.names, values, self.constraints):
            if not c.admits(float(v)):
                raise ParameterDomainError(f"{name}={v} violates {c.kind} constraint")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def to_unconstrained(self) -> np.ndarray:
        return np.array([c.to_unconstrained(v) for c, v in zip(self.constraints, self.values)])

    def from_unconstrained(self, u: Sequence[float]) -> "ModelParams":
        vals = np.array([c.from_unconstrained(ui) for c, ui in zip(self.constraints, u)])
        return ModelParams(self.names, vals, self.constraints)

    def jacobian(self) -> np.ndarray:
        """Diagonal of d(theta)/d(unconstrained)."""
        return np.array([c.derivative(v) for c, v in zip(self.constraints, self.values)], dtype=float)


class StateSpaceModel:
    """Interface shared by all models.

    Subclasses are immutable; ``with_theta`` returns a fresh instance.
    """

    state_dtype = float
    obs_dtype = float

    @property
    def theta(self) -> ModelParams:
        raise NotImplementedError

    def with_theta(self, values) -> "StateSpaceModel":
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return len(self.theta)

    def sample_initial(self, rng, size):
        raise NotImplementedError

    def sample_transition(self, rng, x):
        raise NotImplementedError

    def sample_observation(self, rng, x):
        raise NotImplementedError

    def log_initial(self, x):
        raise NotImplementedError

    def log_transition(self, x_prev, x):
        raise NotImplementedError

    def log_observation(self, y, x):
        raise NotImplementedError

    def grad_log_initial(self, x):
        raise NotImplementedError

    def grad_log_transition(self, x_prev, x):
        raise NotImplementedError

    def grad_log_observation(self, y, x):
        raise NotImplementedError

    def grad_step_log_density(self, x_prev, x, y):
        """Per-step score summand: grad log f(x | x_prev) + grad log g(y | x)."""
        return self.grad_log_transition(x_prev, x) + self.grad_log_observation(y, x)

    @property
    def gaussian_transition(self):
        """``(phi, shift, sigma)`` when f(x'|x) = N(x'; phi*x + shift, sigma^2), else None."""
        return None

    def score_coefficients(self, x, y):
        """Coefficients of the score summand as a quadratic in the previous state.

        Returns an array of shape ``x.shape + (d, 3)`` such that the step
        summand equals ``sum_p coef[..., p] * x_prev**p``.  Only models with
        Gaussian autoregressive transitions provide it.
        """
        raise NotImplementedError

    def to_spec(self) -> dict[str, Any]:
        raise NotImplementedError


def _norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


@dataclass(frozen=True)
class LinearGaussianModel(StateSpaceModel):
    """Scalar linear Gaussian model.

    X_0 ~ N(0, sigma0^2), X_{n+1} = phi X_n + sigma_v V, Y_n = c X_n + sigma_w W.
    The parameter vector is ``(phi, sigma_v, c, sigma_w)``; ``sigma0`` is a
    fixed constant which defaults to the stationary standard deviation when
    ``|phi| < 1`` and to 1 otherwise.

    ``sigma_v = 0`` and ``sigma0 = 0`` are accepted so that noise-free chains
    can be simulated; density evaluation then raises ParameterDomainError.
    """

    phi: float
    sigma_v: float
    c: float
    sigma_w: float
    sigma0: float | None = None

    names = ("phi", "sigma_v", "c", "sigma_w")

    def __post_init__(self):
        for name in ("phi", "sigma_v", "c", "sigma_w"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ParameterDomainError(f"{name} must be finite")
        if self.sigma0 is None:
            s0 = self.sigma_v / math.sqrt(1.0 - self.phi**2) if abs(self.phi) < 1 else 1.0
            object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "sigma0", float(self.sigma0))
        if self.sigma_w <= 0:
            raise ParameterDomainError("sigma_w must be > 0")
        if self.sigma_v < 0 or self.sigma0 < 0 or not math.isfinite(self.sigma0):
            raise ParameterDomainError("sigma_v and sigma0 must be >= 0")

    def _require_nondegenerate(self):
        if self.sigma_v <= 0 or self.sigma0 <= 0:
            raise ParameterDomainError("densities need sigma_v > 0 and sigma0 > 0")

    @property
    def theta(self) -> ModelParams:
        self._require_nondegenerate()
        return ModelParams(
            self.names,
            np.array([self.phi, self.sigma_v, self.c, self.sigma_w]),
            (REAL, POSITIVE, REAL, POSITIVE),
        )

    def with_theta(self, values):
        if isinstance(values, ModelParams):
            values = values.values
        phi, sv, c, sw = (float(v) for v in values)
        return replace(self, phi=phi, sigma_v=sv, c=c, sigma_w=sw)

    def sample_initial(self, rng, size):
        return self.sigma0 * rng.standard_normal(size)

    def sample_transition(self, rng, x):
        x = np.asarray(x, dtype=float)
        return self.phi * x + self.sigma_v * rng.standard_normal(x.shape)

    def sample_observation(self, rng, x):
        x = np.asarray(x, dtype=float)
        return self.c * x + self.sigma_w * rng.standard_normal(x.shape)

    def log_initial(self, x):
        self._require_nondegenerate()
        return _norm_logpdf(np.asarray(x, dtype=float), 0.0, self.sigma0)

    def log_transition(self, x_prev, x):
        self._require_nondegenerate()
        return _norm_logpdf(np.asarray(x, dtype=float), self.phi * np.asarray(x_prev, dtype=float), self.sigma_v)

    def log_observation(self, y, x):
        return _norm_logpdf(np.asarray(y, dtype=float), self.c * np.asarray(x, dtype=float), self.sigma_w)

    def grad_log_initial(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (4,))

    def grad_log_transition(self, x_prev, x):
        self._require_nondegenerate()
        x_prev, x = np.broadcast_arrays(np.asarray(x_prev, float), np.asarray(x, float))
        r = x - self.phi * x_prev
        sv = self.sigma_v
        out = np.zeros(x.shape + (4,))
        out[..., 0] = r * x_prev / sv**2
        out[..., 1] = -1.0 / sv + r * r / sv**3
        return out

    def grad_log_observation(self, y, x):
        y, x = np.broadcast_arrays(np.asarray(y, float), np.asarray(x, float))
        r = y - self.c * x
        sw = self.sigma_w
        out = np.zeros(x.shape + (4,))
        out[..., 2] = r * x / sw**2
        out[..., 3] = -1.0 / sw + r * r / sw**3
        return out

    @property
    def gaussian_transition(self):
        self._require_nondegenerate()
        return (self.phi, 0.0, self.sigma_v)

    def score_coefficients(self, x, y):
        self._require_nondegenerate()
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        phi, sv, c, sw = self.phi, self.sigma_v, self.c, self.sigma_w
        out = np.zeros(x.shape + (4, 3))
        # d/dphi: (x x_prev - phi x_prev^2) / sv^2
        out[..., 0, 1] = x / sv**2
        out[..., 0, 2] = -phi / sv**2
        # d/dsigma_v: -1/sv + (x - phi x_prev)^2 / sv^3
        out[..., 1, 0] = -1.0 / sv + x * x / sv**3
        out[..., 1, 1] = -2.0 * phi * x / sv**3
        out[..., 1, 2] = phi * phi / sv**3
        r = y - c * x
        out[..., 2, 0] = r * x / sw**2
        out[..., 3, 0] = -1.0 / sw + r * r / sw**3
        return out

    def stationary_variance(self) -> float:
        return self.sigma_v**2 / (1.0 - self.phi**2)

    def to_spec(self):
        return {
            "model": "lgssm",
            "params": {
                "phi": self.phi,
                "sigma_v": self.sigma_v,
                "c": self.c,
                "sigma_w": self.sigma_w,
                "sigma0": self.sigma0,
            },
        }


@dataclass(frozen=True)
class StochasticVolatilityModel(StateSpaceModel):
    """Stochastic volatility model with stationary initial law.

    X_0 ~ N(0, sigma2 / (1 - phi^2)), X_{n+1} = phi X_n + sigma V,
    Y_n = beta exp(X_n / 2) W.  Parameters ``(phi, sigma2, beta2)``.
    """

    phi: float
    sigma2: float
    beta2: float

    names = ("phi", "sigma2", "beta2")

    def __post_init__(self):
        for name in self.names:
            object.__setattr__(self, name, float(getattr(self, name)))
        # validates
        self.theta

    @property
    def theta(self) -> ModelParams:
        return ModelParams(
            self.names,
            np.array([self.phi, self.sigma2, self.beta2]),
            (UNIT_INTERVAL, POSITIVE, POSITIVE),
        )

    def with_theta(self, values):
        if isinstance(values, ModelParams):
            values = values.values
        phi, s2, b2 = (float(v) for v in values)
        return StochasticVolatilityModel(phi, s2, b2)

    @property
    def initial_variance(self) -> float:
        return self.sigma2 / (1.0 - self.phi**2)

    def sample_initial(self, rng, size):
        return math.sqrt(self.initial_variance) * rng.standard_normal(size)

    def sample_transition(self, rng, x):
        x = np.asarray(x, dtype=float)
        return self.phi * x + math.sqrt(self.sigma2) * rng.standard_normal(x.shape)

    def sample_observation(self, rng, x):
        x = np.asarray(x, dtype=float)
        return math.sqrt(self.beta2) * np.exp(0.5 * x) * rng.standard_normal(x.shape)

    def log_initial(self, x):
        return _norm_logpdf(np.asarray(x, float), 0.0, math.sqrt(self.initial_variance))

    def log_transition(self, x_prev, x):
        return _norm_logpdf(np.asarray(x, float), self.phi * np.asarray(x_prev, float), math.sqrt(self.sigma2))

    def log_observation(self, y, x):
        y = np.asarray(y, float)
        x = np.asarray(x, float)
        return -0.5 * (LOG_2PI + math.log(self.beta2) + x) - 0.5 * y * y * np.exp(-x) / self.beta2

    def grad_log_initial(self, x):
        x = np.asarray(x, float)
        phi, s2 = self.phi, self.sigma2
        v = self.initial_variance
        dlv = -0.5 / v + 0.5 * x * x / v**2
        out = np.zeros(x.shape + (3,))
        out[..., 0] = dlv * 2.0 * phi * s2 / (1.0 - phi**2) ** 2
        out[..., 1] = dlv / (1.0 - phi**2)
        return out

    def grad_log_transition(self, x_prev, x):
        x_prev, x = np.broadcast_arrays(np.asarray(x_prev, float), np.asarray(x, float))
        r = x - self.phi * x_prev
        s2 = self.sigma2
        out = np.zeros(x.shape + (3,))
        out[..., 0] = r * x_prev / s2
        out[..., 1] = -0.5 / s2 + 0.5 * r * r / s2**2
        return out

    def grad_log_observation(self, y, x):
        y, x = np.broadcast_arrays(np.asarray(y, float), np.asarray(x, float))
        b2 = self.beta2
        out = np.zeros(x.shape + (3,))
        out[..., 2] = -0.5 / b2 + 0.5 * y * y * np.exp(-x) / b2**2
        return out

    @property
    def gaussian_transition(self):
        return (self.phi, 0.0, math.sqrt(self.sigma2))

    def score_coefficients(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        phi, s2, b2 = self.phi, self.sigma2, self.beta2
        out = np.zeros(x.shape + (3, 3))
        out[..., 0, 1] = x / s2
        out[..., 0, 2] = -phi / s2
        out[..., 1, 0] = -0.5 / s2 + 0.5 * x * x / s2**2
        out[..., 1, 1] = -phi * x / s2**2
        out[..., 1, 2] = 0.5 * phi * phi / s2**2
        out[..., 2, 0] = -0.5 / b2 + 0.5 * y * y * np.exp(-x) / b2**2
        return out

    def to_spec(self):
        return {"model": "sv", "params": {"phi": self.phi, "sigma2": self.sigma2, "beta2": self.beta2}}


@dataclass(frozen=True, eq=False)
class FiniteHMM(StateSpaceModel):
    """Finite-state hidden Markov model with a finite observation alphabet.

    States are ``0..K-1`` and observations ``0..M-1``.  The parameter vector
    is the concatenation of the raw entries of ``initial``, ``transition``
    and ``emission``; gradients are plain partial derivatives in those
    entries (the simplex constraint is not projected out).
    """

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    _tol: float = field(default=1e-12, repr=False)

    state_dtype = np.int64
    obs_dtype = np.int64

    def __post_init__(self):
        init = np.array(self.initial, dtype=float)
        trans = np.array(self.transition, dtype=float)
        emis = np.array(self.emission, dtype=float)
        k = init.size
        if init.ndim != 1 or trans.shape != (k, k) or emis.ndim != 2 or emis.shape[0] != k:
            raise ParameterDomainError("inconsistent HMM shapes")
        for name, arr in (("initial", init[None, :]), ("transition", trans), ("emission", emis)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ParameterDomainError(f"{name} must be finite and nonnegative")
            if np.any(np.abs(arr.sum(axis=1) - 1.0) > self._tol):
                raise ParameterDomainError(f"rows of {name} must sum to 1")
        for name, arr in (("initial", init), ("transition", trans), ("emission", emis)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_init", np.log(init))
            object.__setattr__(self, "_log_trans", np.log(trans))
            object.__setattr__(self, "_log_emis", np.log(emis))

    @property
    def n_states(self) -> int:
        return self.initial.size

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[1]

    @property
    def theta(self) -> ModelParams:
        k, m = self.n_states, self.n_symbols
        names = (
            [f"initial[{i}]" for i in range(k)]
            + [f"transition[{i},{j}]" for i in range(k) for j in range(k)]
            + [f"emission[{i},{j}]" for i in range(k) for j in range(m)]
        )
        vals = np.concatenate([self.initial, self.transition.ravel(), self.emission.ravel()])
        return ModelParams(tuple(names), vals, (REAL,) * len(names))

    def with_theta(self, values):
        if isinstance(values, ModelParams):
            values = values.values
        v = np.asarray(values, float)
        k, m = self.n_states, self.n_symbols
        return FiniteHMM(v[:k], v[k : k + k * k].reshape(k, k), v[k + k * k :].reshape(k, m))

    def sample_initial(self, rng, size):
        return rng.choice(self.n_states, size=size, p=self.initial)

    def _sample_rows(self, rng, rows, x):
        x = np.asarray(x, dtype=np.int64)
        cdf = np.cumsum(rows, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(x.shape)
        return (u[..., None] >= cdf[x]).sum(axis=-1).astype(np.int64)

    def sample_transition(self, rng, x):
        return self._sample_rows(rng, self.transition, x)

    def sample_observation(self, rng, x):
        return self._sample_rows(rng, self.emission, x)

    def log_initial(self, x):
        return self._log_init[np.asarray(x, dtype=np.int64)]

    def log_transition(self, x_prev, x):
        return self._log_trans[np.asarray(x_prev, dtype=np.int64), np.asarray(x, dtype=np.int64)]

    def log_observation(self, y, x):
        return self._log_emis[np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64)]

    def _grad_entry(self, offset, table, ncols, i, j):
        i, j = np.broadcast_arrays(np.asarray(i, np.int64), np.asarray(j, np.int64))
        out = np.zeros(i.shape + (self.dim,))
        val = table[i, j]
        with np.errstate(divide="ignore"):
            g = np.where(val > 0, 1.0 / np.where(val > 0, val, 1.0), np.inf)
        idx = offset + i * ncols + j
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return out

    def grad_log_initial(self, x):
        x = np.asarray(x, np.int64)
        return self._grad_entry(0, self.initial[None, :], self.n_states, np.zeros_like(x), x)

    def grad_log_transition(self, x_prev, x):
        return self._grad_entry(self.n_states, self.transition, self.n_states, x_prev, x)

    def grad_log_observation(self, y, x):
        k = self.n_states
        return self._grad_entry(k + k * k, self.emission, self.n_symbols, x, y)

    def to_spec(self):
        return {
            "model": "hmm",
            "params": {
                "initial": self.initial.tolist(),
                "transition": self.transition.tolist(),
                "emission": self.emission.tolist(),
            },
        }


def simulate(model: StateSpaceModel, n: int, seed=None):
    """Draw ``(x_{0:n}, y_{0:n})`` from the model's joint law."""
    if n < 0:
        raise ValueError("horizon n must be >= 0")
    rng = as_generator(seed)
    xs = np.empty(n + 1, dtype=model.state_dtype)
    xs[0] = model.sample_initial(rng, 1)[0]
    for k in range(1, n + 1):
        xs[k] = model.sample_transition(rng, xs[k - 1 : k])[0]
    ys = model.sample_observation(rng, xs)
    return xs, ys


_LGSSM_FIELDS = ("phi", "sigma_v", "c", "sigma_w")


def model_from_spec(spec: dict[str, Any]) -> StateSpaceModel:
    """Build a model from ``{"model": "lgssm"|"sv"|"hmm", "params": {...}}``.

    Field names:

    * lgssm: phi, sigma_v, c, sigma_w, optional sigma0
    * sv: phi, sigma2, beta2
    * hmm: initial (K), transition (K x K), emission (K x M)
    """
    kind = spec.get("model")
    params = dict(spec.get("params", {}))
    try:
        if kind == "lgssm":
            missing = [f for f in _LGSSM_FIELDS if f not in params]
            if missing:
                raise ParameterDomainError(f"lgssm spec missing {missing}")
            return LinearGaussianModel(**{f: params[f] for f in _LGSSM_FIELDS}, sigma0=params.get("sigma0"))
        if kind == "sv":
            return StochasticVolatilityModel(params["phi"], params["sigma2"], params["beta2"])
        if kind == "hmm":
            return FiniteHMM(params["initial"], params["transition"], params["emission"])
    except KeyError as exc:
        raise ParameterDomainError(f"{kind} spec missing field {exc}") from None
    raise ParameterDomainError(f"unknown model kind {kind!r}")


def load_model(path) -> StateSpaceModel:
    return model_from_spec(json.loads(Path(path).read_text()))
