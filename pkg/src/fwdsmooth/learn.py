"""Parameter estimation on top of the forward smoother.

Score functionals, recursive maximum likelihood (RML), batch and online EM
with the stochastic-volatility M-step, step-size schedules, and the
discounted step-size sum used in the variance analysis of online averages.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateBackwardKernelError, DegenerateWeightsError, LambdaDomainError, ParameterDomainError
from .filter import ParticleSet, ResamplingPolicy, bootstrap_step, init_particles
from .functionals import AdditiveFunctional, PolynomialFunctional
from .models import StateSpaceModel, model_from_spec
from .oracle import exact_additive_functionals, kalman_smoother
from .rng import as_generator
from .smoother import ForwardSmootherState, fs_estimate, fs_init, fs_update

__all__ = [
    "StepSchedule",
    "MaximizationMap",
    "score_functional",
    "sv_suff_stats",
    "sv_lambda",
    "lgssm_phi_lambda",
    "SV_M_STEP",
    "LGSSM_PHI_M_STEP",
    "RMLEstimator",
    "OnlineEMEstimator",
    "TraceRecord",
    "batch_em_iteration",
    "step_discount_sum",
    "step_discount_sequence",
    "write_estimation_trace",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSchedule:
    """gamma_n = gamma_const for n <= const_steps, then (n - shift)^(-alpha).

    ``StepSchedule(alpha)`` is the plain n^(-alpha) family;
    ``StepSchedule.constant(g)`` holds gamma at g for every n (g = 0 freezes
    the estimator).
    """

    alpha: float = 0.8
    const_steps: float = 0
    gamma_const: float = 0.0
    shift: float = 0.0

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0.5, 1]")
        if self.const_steps < 0:
            raise ValueError("const_steps must be >= 0")
        if self.const_steps > 0 and not 0.0 <= self.gamma_const <= 1.0:
            raise ValueError("gamma_const must lie in [0, 1]")
        if math.isfinite(self.const_steps) and self.const_steps + 1 - self.shift < 1.0:
            raise ValueError("shift must not exceed const_steps (gamma would exceed 1)")

    @classmethod
    def constant(cls, gamma: float) -> "StepSchedule":
        return cls(1.0, math.inf, gamma, 0.0)

    def __call__(self, n: int) -> float:
        if n < 1:
            raise ValueError("step sizes are indexed from n = 1")
        if n <= self.const_steps:
            return float(self.gamma_const)
        return float((n - self.shift) ** (-self.alpha))

    def sequence(self, n: int) -> np.ndarray:
        """gamma_1 .. gamma_n."""
        idx = np.arange(1, n + 1, dtype=float)
        out = (np.maximum(idx - self.shift, 1.0)) ** (-self.alpha)
        return np.where(idx <= self.const_steps, self.gamma_const, out)


@dataclass(frozen=True)
class MaximizationMap:
    """M-step map Lambda from summary statistics to (a subset of) parameters.

    ``fn(z)`` returns ``{parameter_name: value}`` or raises
    LambdaDomainError; unnamed parameters keep their current values.
    """

    fn: Callable[[np.ndarray], dict]
    name: str = ""

    def __call__(self, z) -> dict:
        return self.fn(np.asarray(z, dtype=float))

    def apply(self, z, model: StateSpaceModel) -> StateSpaceModel:
        upd = self(z)
        theta = model.theta
        vals = [upd.get(n, v) for n, v in zip(theta.names, theta.values)]
        try:
            return model.with_theta(vals)
        except ParameterDomainError as exc:
            raise LambdaDomainError(str(exc)) from None


def score_functional(model: StateSpaceModel, include_initial: bool = False) -> AdditiveFunctional:
    """Per-step summands of the score (Fisher's identity) at the model's theta.

    The initial term grad log mu + grad log g(y_0 | .) is attached only when
    ``include_initial`` is set; by default it is zero, which is harmless for
    long records.
    """
    d = model.dim
    init = None
    if include_initial:
        init = lambda x0, y0: model.grad_log_initial(x0) + model.grad_log_observation(y0, x0)
    if model.gaussian_transition is not None:
        return PolynomialFunctional(d, 2, model.score_coefficients, init, name="score")
    return AdditiveFunctional(d, model.grad_step_log_density, init, name="score")


def sv_suff_stats() -> PolynomialFunctional:
    """(x_{n-1} x_n, x_{n-1}^2, x_n^2, y_n^2 exp(-x_n)) with zero initial term."""

    def coef(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.zeros(x.shape + (4, 3))
        out[..., 0, 1] = x
        out[..., 1, 2] = 1.0
        out[..., 2, 0] = x * x
        out[..., 3, 0] = y * y * np.exp(-x)
        return out

    return PolynomialFunctional(4, 2, coef, name="sv-suff-stats")


def sv_lambda(z) -> np.ndarray:
    """M-step of the SV model: (phi, sigma2, beta2) from the four statistics."""
    z1, z2, z3, z4 = (float(v) for v in np.asarray(z, dtype=float))
    if not all(math.isfinite(v) for v in (z1, z2, z3, z4)):
        raise LambdaDomainError("summary statistics are not finite")
    if not z2 > 0:
        raise LambdaDomainError(f"z2 = {z2} must be > 0")
    phi = z1 / z2
    sigma2 = z3 + phi * phi * z2 - 2.0 * phi * z1
    beta2 = z4
    if not abs(phi) < 1.0:
        raise LambdaDomainError(f"phi = {phi} outside (-1, 1)")
    if not sigma2 > 0:
        raise LambdaDomainError(f"sigma2 = {sigma2} must be > 0")
    if not beta2 > 0:
        raise LambdaDomainError(f"beta2 = {beta2} must be > 0")
    return np.array([phi, sigma2, beta2])


def lgssm_phi_lambda(z) -> float:
    """phi update for the linear Gaussian model from the benchmark statistics.

    Uses the sums of x_{k-1}^2 (z[0]) and x_{k-1} x_k (z[2]); the other
    parameters are held fixed.
    """
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(z)) and z[0] > 0):
        raise LambdaDomainError("sum of squared states must be positive and finite")
    return float(z[2] / z[0])


SV_M_STEP = MaximizationMap(lambda z: dict(zip(("phi", "sigma2", "beta2"), sv_lambda(z))), "sv")
LGSSM_PHI_M_STEP = MaximizationMap(lambda z: {"phi": lgssm_phi_lambda(z)}, "lgssm-phi")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    theta: dict
    gamma: float
    ess: float


def write_estimation_trace(fh, records: Sequence[TraceRecord]):
    """CSV with columns step, parameter_name, value, gamma, ess."""
    writer = csv.writer(fh)
    writer.writerow(("step", "parameter_name", "value", "gamma", "ess"))
    for r in records:
        for name, value in r.theta.items():
            writer.writerow((r.step, name, repr(float(value)), repr(float(r.gamma)), repr(float(r.ess))))


class _OnlineEstimator:
    """Shared plumbing: particle set, smoother state, schedule, trace, checkpoints."""

    kind = ""

    def __init__(self, model, n_particles, schedule, rng=None, policy=None, backend=None):
        if n_particles < 1:
            raise ValueError("need at least one particle")
        self.model = model
        self.n_particles = int(n_particles)
        self.schedule = schedule
        self.rng = as_generator(rng)
        self.policy = policy or ResamplingPolicy()
        self.backend = backend
        self.ps: ParticleSet | None = None
        self.state: ForwardSmootherState | None = None
        self.time = -1
        self.trace: list[TraceRecord] = []

    @property
    def theta(self):
        return self.model.theta

    def _record(self, gamma):
        self.trace.append(TraceRecord(self.time, self.theta.as_dict(), gamma, self.ps.ess()))

    def run(self, ys) -> "_OnlineEstimator":
        for y in ys:
            step = self.time + 1
            try:
                self.observe(y)
            except (DegenerateWeightsError, DegenerateBackwardKernelError) as exc:
                raise type(exc)(f"step {step}: {exc}") from exc
        return self

    def observe(self, y):
        if self.time < 0:
            self.start(y)
        else:
            self.step(y)

    def tail_average(self, window: int = 1000) -> dict:
        """Mean of each parameter over the last ``window`` trace entries."""
        tail = self.trace[-window:]
        if not tail:
            return self.theta.as_dict()
        return {k: float(np.mean([r.theta[k] for r in tail])) for k in tail[0].theta}

    # checkpointing
    def _extra_state(self) -> dict:
        return {}

    def _load_extra(self, d: dict):
        pass

    def checkpoint(self) -> dict:
        if self.ps is None:
            raise ValueError("nothing to checkpoint before the first observation")
        return {
            "kind": self.kind,
            "time": self.time,
            "model": self.model.to_spec(),
            "n_particles": self.n_particles,
            "schedule": asdict(self.schedule),
            "policy": asdict(self.policy),
            "positions": self.ps.positions.tolist(),
            "log_weights": self.ps.log_weights.tolist(),
            "loglik": self.ps.loglik,
            "stats": self.state.stats.tolist(),
            "rng": self.rng.bit_generator.state,
            **self._extra_state(),
        }

    def save_checkpoint(self, path):
        Path(path).write_text(json.dumps(self.checkpoint(), default=_json_default))

    def _restore(self, d: dict):
        self.time = int(d["time"])
        pos = np.asarray(d["positions"], dtype=self.model.state_dtype)
        lw = np.asarray(d["log_weights"], dtype=float)
        w = np.exp(lw)
        w /= w.sum()
        self.ps = ParticleSet(pos, w, lw, self.time, float(d["loglik"]))
        self.state = ForwardSmootherState(np.asarray(d["stats"], dtype=float), self.time)
        self.rng.bit_generator.state = d["rng"]
        self._load_extra(d)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _schedule_from(d):
    d = dict(d)
    if d.get("const_steps") is None:
        d["const_steps"] = math.inf
    return StepSchedule(**d)


class RMLEstimator(_OnlineEstimator):
    """Recursive maximum likelihood via the forward-smoothed score.

    After observing y_n the parameter moves along the increment of the
    score estimate, theta_{n+1} = theta_n + gamma_{n+1} (S_n - S_{n-1}),
    the ascent taking place in unconstrained coordinates.  ``free`` names
    the parameters to estimate; the others stay at their initial values.
    """

    kind = "rml"

    def __init__(
        self,
        model,
        n_particles,
        schedule,
        rng=None,
        free: Sequence[str] | None = None,
        policy=None,
        backend=None,
        include_initial: bool = False,
    ):
        super().__init__(model, n_particles, schedule, rng, policy, backend)
        names = model.theta.names
        free = names if free is None else tuple(free)
        unknown = set(free) - set(names)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        self.free = np.array([n in free for n in names])
        self.include_initial = include_initial
        self.prev_score = np.zeros(len(names))

    def _ascend(self, score):
        incr = score - self.prev_score
        self.prev_score = score
        gamma = self.schedule(self.time + 1)
        theta = self.model.theta
        u = theta.to_unconstrained() + np.where(self.free, gamma * theta.jacobian() * incr, 0.0)
        new = theta.from_unconstrained(u)
        # keep fixed components bit-identical
        vals = np.where(self.free, new.values, theta.values)
        self.model = self.model.with_theta(vals)
        return gamma

    def start(self, y0):
        self.time = 0
        func = score_functional(self.model, self.include_initial)
        self.ps = init_particles(self.model, y0, self.n_particles, self.rng)
        self.state = fs_init(self.ps, func, y0)
        self._record(self._ascend(fs_estimate(self.ps, self.state)))

    def step(self, y):
        func = score_functional(self.model)
        cur = bootstrap_step(self.ps, self.model, y, self.policy, self.rng)
        self.state = fs_update(self.ps, self.state, cur, self.model, func, y, backend=self.backend)
        self.ps = cur
        self.time += 1
        self._record(self._ascend(fs_estimate(self.ps, self.state)))

    def _extra_state(self):
        return {"prev_score": self.prev_score.tolist(), "free": self.free.tolist()}

    def _load_extra(self, d):
        self.prev_score = np.asarray(d["prev_score"], dtype=float)
        self.free = np.asarray(d["free"], dtype=bool)

    @classmethod
    def restore(cls, d: dict, backend=None) -> "RMLEstimator":
        model = model_from_spec(d["model"])
        names = model.theta.names
        free = [n for n, f in zip(names, d["free"]) if f]
        est = cls(model, d["n_particles"], _schedule_from(d["schedule"]), None, free,
                  ResamplingPolicy(**d["policy"]), backend)
        est._restore(d)
        return est


class OnlineEMEstimator(_OnlineEstimator):
    """Online EM with forward-smoothed, exponentially discounted statistics.

    At step n+1 the statistics follow T = (1 - gamma) T + gamma s through the
    forward smoother at theta_n, and theta_{n+1} = Lambda(S_{n+1}) once more
    than ``warmup`` observations have been processed.  An inadmissible
    M-step is skipped and logged in ``skipped``.
    """

    kind = "online-em"

    def __init__(
        self,
        model,
        n_particles,
        schedule,
        suff_stats: AdditiveFunctional | None = None,
        m_step: MaximizationMap | None = None,
        warmup: int = 100,
        rng=None,
        policy=None,
        backend=None,
    ):
        super().__init__(model, n_particles, schedule, rng, policy, backend)
        if warmup < 0:
            raise ValueError("warmup must be >= 0")
        self.func = suff_stats or sv_suff_stats()
        self.m_step = m_step or SV_M_STEP
        self.warmup = int(warmup)
        self.summary = np.zeros(self.func.m)
        self.skipped: list[tuple[int, str]] = []

    def start(self, y0):
        self.time = 0
        self.ps = init_particles(self.model, y0, self.n_particles, self.rng)
        self.state = fs_init(self.ps, self.func, y0)
        self.summary = fs_estimate(self.ps, self.state)
        self._record(float("nan"))

    def step(self, y):
        n1 = self.time + 1
        gamma = self.schedule(n1)
        cur = bootstrap_step(self.ps, self.model, y, self.policy, self.rng)
        self.state = fs_update(self.ps, self.state, cur, self.model, self.func, y, 1.0 - gamma, gamma, self.backend)
        self.ps = cur
        self.time = n1
        self.summary = fs_estimate(self.ps, self.state)
        if n1 > self.warmup:
            try:
                self.model = self.m_step.apply(self.summary, self.model)
            except LambdaDomainError as exc:
                self.skipped.append((n1, str(exc)))
                log.info("M-step skipped at step %d: %s", n1, exc)
        self._record(gamma)

    def _extra_state(self):
        return {"summary": self.summary.tolist(), "warmup": self.warmup, "skipped": self.skipped}

    def _load_extra(self, d):
        self.summary = np.asarray(d["summary"], dtype=float)
        self.skipped = [tuple(s) for s in d["skipped"]]

    @classmethod
    def restore(cls, d: dict, suff_stats=None, m_step=None, backend=None) -> "OnlineEMEstimator":
        model = model_from_spec(d["model"])
        est = cls(model, d["n_particles"], _schedule_from(d["schedule"]), suff_stats, m_step,
                  d["warmup"], None, ResamplingPolicy(**d["policy"]), backend)
        est._restore(d)
        return est


def batch_em_iteration(
    ys,
    model: StateSpaceModel,
    suff_stats: AdditiveFunctional,
    m_step: MaximizationMap,
    n_particles: int | None = None,
    rng=None,
    e_step: str = "smc",
    policy=None,
    backend=None,
) -> StateSpaceModel:
    """One EM iteration theta' = Lambda(S_n / n) over a batch record.

    ``e_step="smc"`` runs the filter and the forward smoother at theta
    (nothing stored beyond the current step); ``e_step="exact"`` uses the
    Kalman/RTS smoother and is available for the linear Gaussian benchmark
    statistics only.
    """
    ys = np.asarray(ys)
    n = len(ys) - 1
    if n < 1:
        raise ValueError("batch EM needs at least two observations")
    if e_step == "exact":
        z = exact_additive_functionals(kalman_smoother(model, ys))
    elif e_step == "smc":
        if n_particles is None:
            raise ValueError("the SMC E-step needs n_particles")
        rng = as_generator(rng)
        ps = init_particles(model, ys[0], n_particles, rng)
        st = fs_init(ps, suff_stats, ys[0])
        for y in ys[1:]:
            cur = bootstrap_step(ps, model, y, policy, rng)
            st = fs_update(ps, st, cur, model, suff_stats, y, backend=backend)
            ps = cur
        z = fs_estimate(ps, st)
    else:
        raise ValueError(f"unknown E-step {e_step!r}")
    return m_step.apply(z / n, model)


def _gammas(alpha, n, schedule):
    if schedule is not None:
        return schedule.sequence(n)
    if not 0.5 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0.5, 1]")
    return np.arange(1, n + 1, dtype=float) ** (-alpha)


def step_discount_sum(alpha: float, n: int, schedule: StepSchedule | None = None) -> float:
    """gamma_n^2 + sum_{i<n} (n+1-i) gamma_i^2 prod_{j=i+1}^n (1-gamma_j)^2.

    Direct evaluation with suffix products; gamma_i = i^(-alpha) unless a
    schedule is given.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = _gammas(alpha, n, schedule)
    q = (1.0 - g) ** 2
    # suffix[i] = prod_{j > i} q_j (0-based)
    suffix = np.ones(n)
    suffix[:-1] = np.cumprod(q[::-1])[::-1][1:]
    i = np.arange(1, n)
    body = np.sum((n + 1 - i) * g[:-1] ** 2 * suffix[:-1])
    return float(g[-1] ** 2 + body)


def step_discount_sequence(alpha: float, n_max: int, schedule: StepSchedule | None = None) -> np.ndarray:
    """step_discount_sum for n = 1..n_max in one O(n_max) recursive pass."""
    g = _gammas(alpha, n_max, schedule)
    out = np.empty(n_max)
    a = b = 0.0
    out[0] = g[0] ** 2
    for k in range(1, n_max):
        q = (1.0 - g[k]) ** 2
        a, b = q * (a + g[k - 1] ** 2), q * (b + a + 2.0 * g[k - 1] ** 2)
        out[k] = g[k] ** 2 + b
    return out
