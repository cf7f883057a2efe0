"""Estimators of smoothed additive functionals.

* forward-only smoothing (``fs_*``), O(N^2) per step;
* batch forward filtering backward smoothing (``ffbs_backward``);
* the path-space estimator (``path_*``), O(N) per step;
* the fixed-lag estimator (``fixed_lag_*``).

The forward smoother and the path-space recursion accept blend
coefficients ``(a, b)`` so that T_n = a * T_{n-1} + b * s_n; ``(1, 1)`` gives
plain sums and ``(1 - gamma, gamma)`` gives the discounted running averages
used by online EM.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _backend
from .errors import DegenerateBackwardKernelError
from .filter import ParticleSet, ResamplingPolicy, bootstrap_step, init_particles
from .functionals import AdditiveFunctional, PolynomialFunctional
from .rng import as_generator

__all__ = [
    "ForwardSmootherState",
    "PathStatistics",
    "FixedLagState",
    "FFBSResult",
    "backward_apply",
    "fs_init",
    "fs_update",
    "fs_estimate",
    "ffbs_backward",
    "path_init",
    "path_space_update",
    "path_estimate",
    "fixed_lag_init",
    "fixed_lag_update",
    "fixed_lag_estimate",
    "run_smoothers",
    "write_estimator_trace",
]

# Backward-kernel normalisers below exp(-700) are treated as degenerate.
LOG_DEN_FLOOR = -700.0
_LOG_W_FLOOR = -1e300
_CHUNK_ELEMENTS = 1 << 20


def _finite_log_w(log_w):
    return np.maximum(np.asarray(log_w, dtype=float), _LOG_W_FLOOR)


def _check_log_den(log_den):
    worst = float(np.min(log_den)) if log_den.size else 0.0
    if not worst >= LOG_DEN_FLOOR:
        i = int(np.argmin(log_den))
        raise DegenerateBackwardKernelError(
            f"backward kernel normaliser for particle {i} is exp({worst:.1f}); "
            "no previous particle can reach it"
        )


def _backward_rows(model, log_w_prev, x_prev, x_cur):
    """Normalised backward-kernel rows for the particles in ``x_cur``.

    Returns ``(K, log_den)`` with K[i, j] ∝ W_{n-1}^(j) f(x_cur[i] | x_prev[j]).
    """
    lt = _finite_log_w(log_w_prev)[None, :] + np.asarray(
        model.log_transition(x_prev[None, :], x_cur[:, None]), dtype=float
    )
    mx = lt.max(axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(lt - safe[:, None])
    s = e.sum(axis=1)
    with np.errstate(divide="ignore"):
        log_den = safe + np.log(s)
    log_den = np.where(np.isfinite(mx), log_den, -np.inf)
    _check_log_den(log_den)
    return e / s[:, None], log_den


def _row_chunks(n_rows, n_cols, extra=1):
    step = max(1, _CHUNK_ELEMENTS // max(n_cols * extra, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def backward_apply(model, log_w_prev, x_prev, x_cur, features, backend=None) -> np.ndarray:
    """Apply the normalised backward kernel to per-particle ``features``.

    ``features`` has shape ``(N_prev, q)``; the result has shape
    ``(N_cur, q)`` with row i equal to sum_j b_ij features[j].
    """
    features = np.asarray(features, dtype=float)
    gt = model.gaussian_transition
    if gt is not None:
        phi, shift, sigma = gt
        mean = phi * np.asarray(x_prev, dtype=float) + shift
        out, log_den = _backend.gauss_backward_apply(
            np.ascontiguousarray(_finite_log_w(log_w_prev)),
            np.ascontiguousarray(mean),
            np.ascontiguousarray(x_cur, dtype=float),
            float(sigma),
            np.ascontiguousarray(features.T),
            backend=backend,
        )
        _check_log_den(log_den - math.log(sigma) - 0.5 * math.log(2.0 * math.pi))
        return out
    out = np.empty((len(x_cur), features.shape[1]))
    for sl in _row_chunks(len(x_cur), len(x_prev)):
        k, _ = _backward_rows(model, log_w_prev, x_prev, x_cur[sl])
        out[sl] = k @ features
    return out


@dataclass(frozen=True)
class ForwardSmootherState:
    """Per-particle auxiliary statistics T_n^(i), aligned with the particle set."""

    stats: np.ndarray
    time: int = 0

    @property
    def size(self) -> int:
        return self.stats.shape[0]


def fs_init(ps: ParticleSet, func: AdditiveFunctional, y0) -> ForwardSmootherState:
    return ForwardSmootherState(func.initial(ps.positions, y0).reshape(ps.size, func.m), ps.time)


def fs_update(
    prev: ParticleSet,
    state: ForwardSmootherState,
    cur: ParticleSet,
    model,
    func: AdditiveFunctional,
    y,
    a: float = 1.0,
    b: float = 1.0,
    backend=None,
) -> ForwardSmootherState:
    """One step of the forward smoothing recursion.

    T_n^(i) = sum_j b_ij [a T_{n-1}^(j) + b s(X_{n-1}^(j), X_n^(i), y)] with
    b_ij ∝ W_{n-1}^(j) f(X_n^(i) | X_{n-1}^(j)).
    """
    if state.size != prev.size:
        raise ValueError("smoother state and previous particle set are misaligned")
    x_prev = prev.positions
    x_cur = cur.positions
    t_prev = state.stats
    m = func.m
    if isinstance(func, PolynomialFunctional):
        xp = np.asarray(x_prev, dtype=float)
        powers = [xp**p for p in range(1, func.degree + 1)]
        feats = np.column_stack([t_prev] + powers) if powers else t_prev
        moments = backward_apply(model, prev.log_weights, x_prev, x_cur, feats, backend)
        coef = func.coefficients(x_cur, y)
        s_bar = coef[..., 0].copy()
        for p in range(1, func.degree + 1):
            s_bar += coef[..., p] * moments[:, m + p - 1][:, None]
        new = a * moments[:, :m] + b * s_bar
    else:
        new = np.empty((len(x_cur), m))
        for sl in _row_chunks(len(x_cur), len(x_prev), m + 1):
            k, _ = _backward_rows(model, prev.log_weights, x_prev, x_cur[sl])
            s = func.step(x_prev[None, :], x_cur[sl, None], y)
            new[sl] = a * (k @ t_prev) + b * np.einsum("ij,ijm->im", k, s)
    return ForwardSmootherState(new, cur.time)


def fs_estimate(ps: ParticleSet, state: ForwardSmootherState) -> np.ndarray:
    if state.size != ps.size:
        raise ValueError("smoother state and particle set are misaligned")
    return ps.weights @ state.stats


@dataclass(frozen=True)
class FFBSResult:
    estimate: np.ndarray
    table: np.ndarray | None = None

    def smoothed_means(self, history: Sequence[ParticleSet]) -> np.ndarray:
        """Sum_i W_{k|n}^(i) X_k^(i) for every k (needs the stored table)."""
        if self.table is None:
            raise ValueError("weight table was not stored")
        return np.array([row @ np.asarray(ps.positions, dtype=float) for row, ps in zip(self.table, history)])


def ffbs_backward(
    history: Sequence[ParticleSet],
    model,
    func: AdditiveFunctional,
    ys,
    store_table: bool = False,
) -> FFBSResult:
    """Batch backward pass over a stored filter history.

    Evaluates the step statistics on every particle pair, independently of
    the polynomial shortcut used by ``fs_update``.
    """
    n = len(history) - 1
    w_smooth = history[n].weights.copy()
    table = np.empty((n + 1, history[n].size)) if store_table else None
    if store_table:
        table[n] = w_smooth
    est = np.zeros(func.m)
    for k in range(n, 0, -1):
        prev, cur = history[k - 1], history[k]
        w_prev = np.zeros(prev.size)
        for sl in _row_chunks(cur.size, prev.size, func.m + 1):
            kern, _ = _backward_rows(model, prev.log_weights, prev.positions, cur.positions[sl])
            pair = w_smooth[sl, None] * kern
            s = func.step(prev.positions[None, :], cur.positions[sl, None], ys[k])
            est += np.einsum("ij,ijm->m", pair, s)
            w_prev += pair.sum(axis=0)
        w_smooth = w_prev
        if store_table:
            table[k - 1] = w_smooth
    est += w_smooth @ func.initial(history[0].positions, ys[0]).reshape(history[0].size, func.m)
    return FFBSResult(est, table)


@dataclass(frozen=True)
class PathStatistics:
    """Running functional sums along each particle's ancestral path."""

    stats: np.ndarray
    time: int = 0


def path_init(ps: ParticleSet, func: AdditiveFunctional, y0) -> PathStatistics:
    return PathStatistics(func.initial(ps.positions, y0).reshape(ps.size, func.m), ps.time)


def path_space_update(
    stats: PathStatistics,
    ancestors,
    prev_positions,
    cur_positions,
    func: AdditiveFunctional,
    y,
    a: float = 1.0,
    b: float = 1.0,
) -> PathStatistics:
    anc = np.asarray(ancestors)
    s = func.step(np.asarray(prev_positions)[anc], cur_positions, y)
    return PathStatistics(a * stats.stats[anc] + b * s, stats.time + 1)


def path_estimate(ps: ParticleSet, stats: PathStatistics) -> np.ndarray:
    return ps.weights @ stats.stats


@dataclass(frozen=True)
class FixedLagState:
    """Fixed-lag bookkeeping.

    ``pending`` holds the per-particle contribution blocks of the last
    ``lag`` steps, still reindexed at every resampling; older contributions
    have been collapsed into ``frozen``.
    """

    lag: int
    frozen: np.ndarray
    pending: tuple = field(default_factory=tuple)
    time: int = 0


def _freeze(lag, frozen, pending, weights, time):
    keep = []
    for k, block in pending:
        if time - k >= lag:
            frozen = frozen + weights @ block
        else:
            keep.append((k, block))
    return frozen, tuple(keep)


def fixed_lag_init(ps: ParticleSet, func: AdditiveFunctional, y0, lag: int) -> FixedLagState:
    if lag < 0:
        raise ValueError("lag must be >= 0")
    block = func.initial(ps.positions, y0).reshape(ps.size, func.m)
    frozen, pending = _freeze(lag, np.zeros(func.m), ((ps.time, block),), ps.weights, ps.time)
    return FixedLagState(lag, frozen, pending, ps.time)


def fixed_lag_update(
    state: FixedLagState,
    cur: ParticleSet,
    prev_positions,
    func: AdditiveFunctional,
    y,
    a: float = 1.0,
    b: float = 1.0,
) -> FixedLagState:
    anc = np.asarray(cur.ancestors)
    pending = tuple((k, a * block[anc]) for k, block in state.pending)
    s = func.step(np.asarray(prev_positions)[anc], cur.positions, y)
    pending = pending + ((cur.time, b * s),)
    frozen, pending = _freeze(state.lag, a * state.frozen, pending, cur.weights, cur.time)
    return FixedLagState(state.lag, frozen, pending, cur.time)


def fixed_lag_estimate(ps: ParticleSet, state: FixedLagState) -> np.ndarray:
    est = state.frozen.copy()
    for _, block in state.pending:
        est += ps.weights @ block
    return est


ESTIMATORS = ("fs", "ffbs", "path", "fixedlag")


def run_smoothers(
    model,
    ys,
    func: AdditiveFunctional,
    n_particles: int,
    rng=None,
    estimators: Iterable[str] = ("fs", "path"),
    checkpoints: Sequence[int] | None = None,
    lag: int | None = None,
    policy: ResamplingPolicy | None = None,
    backend=None,
) -> dict[str, np.ndarray]:
    """Run several estimators on one shared particle realisation.

    Returns ``{estimator: array (len(checkpoints), m)}``; checkpoints default
    to every time step.
    """
    estimators = tuple(estimators)
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    if "fixedlag" in estimators and lag is None:
        raise ValueError("the fixed-lag estimator needs an explicit lag")
    n = len(ys) - 1
    checkpoints = list(range(n + 1)) if checkpoints is None else sorted(checkpoints)
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > n):
        raise ValueError("checkpoints must lie in [0, n]")
    rng = as_generator(rng)
    want = {c: i for i, c in enumerate(checkpoints)}
    out = {e: np.full((len(checkpoints), func.m), np.nan) for e in estimators}

    ps = init_particles(model, ys[0], n_particles, rng)
    fs = fs_init(ps, func, ys[0]) if "fs" in estimators else None
    path = path_init(ps, func, ys[0]) if "path" in estimators else None
    fl = fixed_lag_init(ps, func, ys[0], lag) if "fixedlag" in estimators else None
    history = [ps] if "ffbs" in estimators else None

    def record(t, cur):
        if t not in want:
            return
        row = want[t]
        if fs is not None:
            out["fs"][row] = fs_estimate(cur, fs)
        if path is not None:
            out["path"][row] = path_estimate(cur, path)
        if fl is not None:
            out["fixedlag"][row] = fixed_lag_estimate(cur, fl)
        if history is not None:
            out["ffbs"][row] = ffbs_backward(history, model, func, ys[: t + 1]).estimate

    record(0, ps)
    for t in range(1, (checkpoints[-1] if checkpoints else 0) + 1):
        cur = bootstrap_step(ps, model, ys[t], policy, rng)
        if fs is not None:
            fs = fs_update(ps, fs, cur, model, func, ys[t], backend=backend)
        if path is not None:
            path = path_space_update(path, cur.ancestors, ps.positions, cur.positions, func, ys[t])
        if fl is not None:
            fl = fixed_lag_update(fl, cur, ps.positions, func, ys[t])
        if history is not None:
            history.append(cur)
        ps = cur
        record(t, ps)
    return out


def write_estimator_trace(fh, records: Iterable[tuple]):
    """CSV with columns step, estimator, statistic_index, value."""
    writer = csv.writer(fh)
    writer.writerow(("step", "estimator", "statistic_index", "value"))
    for step, estimator, index, value in records:
        writer.writerow((step, estimator, index, repr(float(value))))
