"""Closed-form identities on 1-D and bivariate Gaussians.

Every kernel tracks the log of the multiplicative constant in front of a
normalized density, so products of unnormalized factors stay exact and the
marginal likelihood can be accumulated without underflow.

The scalar ``_*`` kernels are numba-compiled so that the message-passing
recursions in :mod:`ou_denoise.em` can call them inside compiled loops; the
public functions validate their arguments and work on :class:`Gaussian1`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gaussian1:
    """``exp(log_scale) * N(x; mean, variance)``."""

    mean: float
    variance: float
    log_scale: float = 0.0

    def __post_init__(self):
        if not (self.variance > 0.0) or not math.isfinite(self.variance):
            raise ValueError(f"variance must be positive and finite, got {self.variance!r}")
        if not math.isfinite(self.log_scale):
            raise ValueError(f"log_scale must be finite, got {self.log_scale!r}")
        if not math.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean!r}")

    def logpdf(self, x):
        """Log of the (scaled) density at ``x``; works on scalars and arrays."""
        return self.log_scale - 0.5 * (LOG_2PI + math.log(self.variance)) - 0.5 * (x - self.mean) ** 2 / self.variance

    def pdf(self, x):
        return np.exp(self.logpdf(x))


# ---------------------------------------------------------------------------
# compiled scalar kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _log_normal(x, mean, variance):
    d = x - mean
    return -0.5 * (LOG_2PI + math.log(variance)) - 0.5 * d * d / variance


@njit(cache=True)
def _product(m1, v1, m2, v2):
    """Product of two normalized densities: returns (mean, var, log overlap)."""
    s = v1 + v2
    mean = (m1 * v2 + m2 * v1) / s
    var = v1 * v2 / s
    return mean, var, _log_normal(m1, m2, s)


@njit(cache=True)
def _propagate(m, v, A, B):
    """Push N(m, v) through x' | x ~ N(B x, A(1 - B^2))."""
    return B * m, B * B * v + A * (1.0 - B * B)


@njit(cache=True)
def _bivariate_moments(mu_x, var_x, mu_y, var_y, A, B):
    """Moments of p(x, y) ∝ N(x; mu_x, var_x) N(y; B x, Q) N(y; mu_y, var_y).

    Returns (mean_x, mean_y, var_x, var_y, cov_xy) of the normalized joint.
    """
    q = A * (1.0 - B * B)
    d = q + B * B * var_x + var_y
    mx = (mu_x * (var_y + q) + B * var_x * mu_y) / d
    my = (B * var_y * mu_x + mu_y * (q + B * B * var_x)) / d
    vx = var_x * (var_y + q) / d
    vy = var_y * (q + B * B * var_x) / d
    cxy = B * var_x * var_y / d
    return mx, my, vx, vy, cxy


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _check_transition(A, B):
    if not (0.0 < B < 1.0):
        raise ValueError(f"transition coefficient B must lie in (0, 1), got {B!r}")
    if not (A > 0.0) or not math.isfinite(A):
        raise ValueError(f"stationary variance A must be positive, got {A!r}")


def product(a: Gaussian1, b: Gaussian1) -> Gaussian1:
    """Pointwise product, exact including the overlap constant.

    ``a.pdf(x) * b.pdf(x) == product(a, b).pdf(x)`` for every x.
    """
    mean, var, log_c = _product(a.mean, a.variance, b.mean, b.variance)
    return Gaussian1(mean, var, a.log_scale + b.log_scale + log_c)


def convolve(a: Gaussian1, b: Gaussian1) -> Gaussian1:
    """Density of the sum of two independent variables (scales multiply)."""
    return Gaussian1(a.mean + b.mean, a.variance + b.variance, a.log_scale + b.log_scale)


def propagate_through_transition(msg: Gaussian1, A: float, B: float) -> Gaussian1:
    """Integrate ``msg(x) N(x'; B x, A(1 - B^2)) dx`` as a function of x'.

    The transition kernel is normalized in x', so the scale is carried over.
    """
    _check_transition(A, B)
    mean, var = _propagate(msg.mean, msg.variance, A, B)
    return Gaussian1(mean, var, msg.log_scale)


def bivariate_moments(mu_x, var_x, mu_y, var_y, A, B):
    """Means, variances and covariance of the three-factor bivariate density.

    See :func:`bivariate_cross_moment` for the density.
    """
    _check_transition(A, B)
    if not (var_x > 0.0 and var_y > 0.0):
        raise ValueError("var_x and var_y must be positive")
    return _bivariate_moments(float(mu_x), float(var_x), float(mu_y), float(var_y), float(A), float(B))


def bivariate_cross_moment(mu_x, var_x, mu_y, var_y, A, B) -> float:
    """E[xy] under p(x, y) ∝ N(x; mu_x, var_x) N(y; Bx, A(1-B^2)) N(y; mu_y, var_y).

    Writing ``Q = A(1-B^2)`` and ``D = Q + B^2 var_x + var_y``::

        E[xy] = [ Q^2 mu_x mu_y
                  + Q (B var_y mu_x^2 + B^2 var_x mu_x mu_y + var_y mu_x mu_y
                       + B var_x mu_y^2 + B var_x var_y)
                  + B (var_y^2 (mu_x^2 + var_x) + 2 B var_x var_y mu_x mu_y
                       + B^2 var_x^2 (mu_y^2 + var_y)) ] / D^2

    Note the squares on ``var_y^2`` and ``var_x^2`` in the last bracket;
    without them the expression is dimensionally inconsistent and fails the
    quadrature check in the test suite.
    """
    mx, my, _, _, cxy = bivariate_moments(mu_x, var_x, mu_y, var_y, A, B)
    return cxy + mx * my
