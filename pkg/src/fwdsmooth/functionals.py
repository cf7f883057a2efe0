"""Additive functionals S_n = s_0(x_0, y_0) + sum_k s_k(x_{k-1}, x_k, y_k)."""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "AdditiveFunctional",
    "PolynomialFunctional",
    "constant_functional",
    "lgssm_benchmark_functional",
    "state_functional",
]


class AdditiveFunctional:
    """Vector of ``m`` step statistics plus an optional initial term.

    ``step(x_prev, x, y)`` must broadcast its state arguments and return an
    array of shape ``broadcast_shape + (m,)``.  ``initial(x0, y0)`` returns
    ``x0.shape + (m,)``; when omitted it is identically zero.
    """

    def __init__(self, m: int, step: Callable, initial: Callable | None = None, name: str = ""):
        if m < 1:
            raise ValueError("a functional needs at least one statistic")
        self.m = m
        self._step = step
        self._initial = initial
        self.name = name

    def step(self, x_prev, x, y) -> np.ndarray:
        return np.asarray(self._step(x_prev, x, y), dtype=float)

    def initial(self, x0, y0) -> np.ndarray:
        x0 = np.asarray(x0)
        if self._initial is None:
            return np.zeros(x0.shape + (self.m,))
        return np.asarray(self._initial(x0, y0), dtype=float)

    @property
    def has_initial(self) -> bool:
        return self._initial is not None

    def scaled(self, factor: float) -> "AdditiveFunctional":
        init = None if self._initial is None else (lambda x0, y0: factor * self.initial(x0, y0))
        return AdditiveFunctional(self.m, lambda xp, x, y: factor * self.step(xp, x, y), init, self.name)


class PolynomialFunctional(AdditiveFunctional):
    """Functional that is a polynomial in the previous state.

    ``coefficients(x, y)`` returns ``x.shape + (m, degree + 1)`` with
    s_l(x_prev, x, y) = sum_p coef[..., l, p] * x_prev**p.  The forward
    smoother exploits this form to replace pairwise evaluation with a few
    backward-kernel moments.
    """

    def __init__(self, m: int, degree: int, coefficients: Callable, initial: Callable | None = None, name: str = ""):
        super().__init__(m, self._eval_step, initial, name)
        self.degree = degree
        self._coefficients = coefficients

    def coefficients(self, x, y) -> np.ndarray:
        return np.asarray(self._coefficients(np.asarray(x), y), dtype=float)

    def _eval_step(self, x_prev, x, y):
        x_prev, x = np.broadcast_arrays(np.asarray(x_prev, dtype=float), np.asarray(x))
        coef = self.coefficients(x, y)
        out = coef[..., 0].copy()
        power = np.ones_like(x_prev)
        for p in range(1, self.degree + 1):
            power = power * x_prev
            out += coef[..., p] * power[..., None]
        return out

    def scaled(self, factor: float) -> "PolynomialFunctional":
        init = None if self._initial is None else (lambda x0, y0: factor * self.initial(x0, y0))
        return PolynomialFunctional(self.m, self.degree, lambda x, y: factor * self.coefficients(x, y), init, self.name)


def constant_functional(value: float = 1.0, m: int = 1) -> PolynomialFunctional:
    """s_k == value for every k >= 1 and zero initial term."""

    def coef(x, y):
        out = np.zeros(np.shape(x) + (m, 1))
        out[..., 0] = value
        return out

    return PolynomialFunctional(m, 0, coef, name="constant")


def lgssm_benchmark_functional() -> PolynomialFunctional:
    """The three benchmark statistics (x_{k-1}^2, x_{k-1}, x_{k-1} x_k)."""

    def coef(x, y):
        out = np.zeros(np.shape(x) + (3, 3))
        out[..., 0, 2] = 1.0
        out[..., 1, 1] = 1.0
        out[..., 2, 1] = x
        return out

    return PolynomialFunctional(3, 2, coef, name="lgssm-benchmark")


def state_functional(fn: Callable | None = None) -> AdditiveFunctional:
    """Single statistic depending on the current state only, s_k = fn(x_k)."""
    fn = fn or (lambda x: x)

    def coef(x, y):
        out = np.zeros(np.shape(x) + (1, 1))
        out[..., 0, 0] = fn(np.asarray(x, dtype=float))
        return out

    return PolynomialFunctional(1, 0, coef, name="state")
