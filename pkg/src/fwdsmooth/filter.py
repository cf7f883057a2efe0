"""Bootstrap particle filter."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DegenerateWeightsError
from .rng import as_generator

__all__ = [
    "ParticleSet",
    "ResamplingPolicy",
    "ess",
    "resample",
    "init_particles",
    "bootstrap_step",
    "run_filter",
    "ParticleDumper",
]


@dataclass(frozen=True)
class ParticleSet:
    """Weighted particle approximation of the filter at time ``time``.

    ``ancestors`` holds the indices into the previous set that the particles
    were propagated from (identity when no resampling happened, ``None`` at
    time 0).
    """

    positions: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray
    time: int
    loglik: float
    ancestors: np.ndarray | None = None
    resampled: bool = False

    def __post_init__(self):
        for name in ("positions", "weights", "log_weights", "ancestors"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.weights.size

    def ess(self) -> float:
        return ess(self.weights)


@dataclass(frozen=True)
class ResamplingPolicy:
    """Resampling scheme and trigger.

    A threshold of 1 (the default) resamples at every step; a smaller value
    resamples only when ESS < threshold * N.
    """

    scheme: str = "systematic"
    ess_threshold: float = 1.0

    def __post_init__(self):
        if self.scheme not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.scheme!r}")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")

    def triggers(self, weights: np.ndarray) -> bool:
        if self.ess_threshold >= 1.0:
            return True
        return ess(weights) < self.ess_threshold * weights.size


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.dot(w, w))


def resample(weights, scheme: str = "systematic", rng=None) -> np.ndarray:
    """Ancestor indices drawn according to normalised ``weights``."""
    rng = as_generator(rng)
    w = np.asarray(weights, dtype=float)
    n = w.size
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if scheme == "systematic":
        u = (rng.random() + np.arange(n)) / n
    elif scheme == "multinomial":
        u = rng.random(n)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, n - 1)


def _normalise(log_w):
    mx = np.max(log_w)
    if not np.isfinite(mx):
        raise DegenerateWeightsError("all particle weights are zero")
    w = np.exp(log_w - mx)
    total = w.sum()
    w /= total
    log_norm = mx + np.log(total)
    return w, log_w - log_norm, log_norm


def init_particles(model, y0, n_particles: int, rng=None) -> ParticleSet:
    if n_particles < 1:
        raise ValueError("need at least one particle")
    rng = as_generator(rng)
    x = np.asarray(model.sample_initial(rng, n_particles))
    lw = np.asarray(model.log_observation(y0, x), dtype=float)
    w, lwn, log_norm = _normalise(lw)
    loglik = log_norm - np.log(n_particles)
    return ParticleSet(x, w, lwn, 0, float(loglik))


def bootstrap_step(ps: ParticleSet, model, y, policy: ResamplingPolicy | None = None, rng=None) -> ParticleSet:
    """Resample (per policy), propagate through f, reweight by g, normalise."""
    policy = policy or ResamplingPolicy()
    rng = as_generator(rng)
    n = ps.size
    if policy.triggers(ps.weights):
        anc = resample(ps.weights, policy.scheme, rng)
        prior_lw = np.full(n, -np.log(n))
        resampled = True
    else:
        anc = np.arange(n)
        prior_lw = ps.log_weights
        resampled = False
    x = np.asarray(model.sample_transition(rng, ps.positions[anc]))
    lw = prior_lw + np.asarray(model.log_observation(y, x), dtype=float)
    w, lwn, log_norm = _normalise(lw)
    return ParticleSet(x, w, lwn, ps.time + 1, ps.loglik + float(log_norm), anc, resampled)


def run_filter(model, ys, n_particles: int, rng=None, policy=None) -> Iterator[ParticleSet]:
    """Yield the particle set at every time step of ``ys``."""
    rng = as_generator(rng)
    ps = init_particles(model, ys[0], n_particles, rng)
    yield ps
    for y in ys[1:]:
        ps = bootstrap_step(ps, model, y, policy, rng)
        yield ps


class ParticleDumper:
    """Append particle sets to a CSV with columns step, particle_index, position, weight."""

    header = ("step", "particle_index", "position", "weight")

    def __init__(self, fh):
        self._writer = csv.writer(fh)
        self._writer.writerow(self.header)

    def write(self, ps: ParticleSet):
        for i, (x, w) in enumerate(zip(ps.positions.tolist(), ps.weights.tolist())):
            self._writer.writerow((ps.time, i, repr(x), repr(w)))
