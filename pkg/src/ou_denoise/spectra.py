"""First- and second-order power spectra and fourth-order correlations.

The second-order spectrum is the periodogram of the demeaned squared
series.  It separates multiplicative noise (whose squares inherit the
latent correlation time) from white noise, which the first-order spectrum
cannot do.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import welch

from .model import TimeSeries

NORMALIZATIONS = ("area-equals-variance", "raw")


@dataclass
class Spectrum:
    freqs: np.ndarray
    power: np.ndarray
    normalization: str = "area-equals-variance"

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.freqs.shape != self.power.shape:
            raise ValueError("freqs and power differ in length")

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def area(self) -> float:
        """Rectangle-rule integral over the uniform frequency grid."""
        return float(np.sum(self.power) * self.df)

    def to_csv(self, path, extra_columns: dict | None = None) -> None:
        extra_columns = extra_columns or {}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["freq", "power", *extra_columns])
            cols = [np.asarray(c) for c in extra_columns.values()]
            for i, (fr, p) in enumerate(zip(self.freqs, self.power)):
                w.writerow([repr(float(fr)), repr(float(p)), *(repr(float(c[i])) for c in cols)])


@dataclass
class CorrelationCurve:
    lags: np.ndarray
    values: np.ndarray

    def to_csv(self, path, extra_columns: dict | None = None) -> None:
        extra_columns = extra_columns or {}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lag", "value", *extra_columns])
            cols = [np.asarray(c) for c in extra_columns.values()]
            for i, (lag, v) in enumerate(zip(self.lags, self.values)):
                w.writerow([repr(float(lag)), repr(float(v)), *(repr(float(c[i])) for c in cols)])


def _spectrum(values: np.ndarray, dt: float, normalization: str, segments: int | None) -> Spectrum:
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    n = len(values)
    if n < 8:
        raise ValueError(f"series too short for a spectrum: {n} < 8")
    v = values - values.mean()
    if segments and segments > 1:
        nperseg = max(8, int(2 * n // (segments + 1)))
        freqs, power = welch(v, fs=1.0 / dt, window="boxcar", nperseg=nperseg, noverlap=nperseg // 2, detrend="constant")
    else:
        coef = np.fft.rfft(v)
        freqs = np.fft.rfftfreq(n, dt)
        power = 2.0 * dt * np.abs(coef) ** 2 / n
        if n % 2 == 0:
            power[-1] /= 2.0
    # the zero-frequency bin of a demeaned series carries no power
    freqs, power = freqs[1:], power[1:]
    if normalization == "area-equals-variance":
        total = np.sum(power) * (freqs[1] - freqs[0])
        var = np.var(v)
        power = power * (var / total) if total > 0 else power
    return Spectrum(freqs, power, normalization)


def periodogram(y: TimeSeries, normalization: str = "area-equals-variance", segments: int | None = None) -> Spectrum:
    """One-sided periodogram of the demeaned series.

    With ``segments > 1`` the estimate averages half-overlapping segments.
    Under ``area-equals-variance`` the spectrum is rescaled so that
    :meth:`Spectrum.area` equals the sample variance.
    """
    return _spectrum(y.values, y.dt, normalization, segments)


def second_order_spectrum(y: TimeSeries, normalization: str = "area-equals-variance", segments: int | None = None) -> Spectrum:
    """Periodogram of the squared series; area equals the variance of y^2."""
    return _spectrum(y.values**2, y.dt, normalization, segments)


def analytic_g2(s: float, t: float, theta: float, sigma: float) -> float:
    """E[x_s^2 x_t^2] for dx = -theta x dt + sigma dW started at x_0 = 0.

    With ``m = min(s, t)``, ``d = |t - s|``::

        g = sigma^4 / (4 theta^2) * [ 3 (1 - e^{-2 theta m})^2 e^{-2 theta d}
                                      + (1 - e^{-2 theta m}) (1 - e^{-2 theta d}) ]

    which is ``sigma^4 e^{-2 theta (s+t)} / (2 theta)`` times
    ``3/(2 theta) (e^{4 theta m} - 2 e^{2 theta m} + 1)
    + (e^{2 theta m} - 1)(e^{2 theta M} - e^{2 theta m}) / (2 theta)``.
    Evaluated in the first form, it is stable for any ``theta * max(s, t)``.
    """
    if s < 0 or t < 0:
        raise ValueError("times must be non-negative")
    if not (theta > 0 and sigma > 0):
        raise ValueError("theta and sigma must be positive")
    m = min(s, t)
    d = abs(t - s)
    a = -math.expm1(-2.0 * theta * m)
    decay = math.exp(-2.0 * theta * d)
    b = -math.expm1(-2.0 * theta * d)
    return sigma**4 / (4.0 * theta**2) * (3.0 * a * a * decay + a * b)


def stationary_g2(lag, A: float, tau: float):
    """Large-time limit of :func:`analytic_g2` in the (A, tau) parameterization.

    ``theta = 1/tau``, ``A = sigma^2 / (2 theta)``; equals ``A^2 (1 + 2 e^{-2|lag|/tau})``.
    """
    lag = np.abs(np.asarray(lag, dtype=float))
    return A**2 * (1.0 + 2.0 * np.exp(-2.0 * lag / tau))


def ar1_spectrum(freqs, variance: float, r: float, dt: float):
    """One-sided density of a sampled series with autocovariance ``variance * r^|k|``.

    Integrates to ``variance`` over ``[0, 1/(2 dt)]``.
    """
    f = np.asarray(freqs, dtype=float)
    return 2.0 * variance * dt * (1.0 - r * r) / (1.0 - 2.0 * r * np.cos(2.0 * np.pi * f * dt) + r * r)


def ou_spectrum(freqs, A: float, tau: float, dt: float):
    """One-sided spectral density of a sampled stationary OU series (variance ``A``)."""
    return ar1_spectrum(freqs, A, math.exp(-dt / tau), dt)


def ou_squared_spectrum(freqs, A: float, tau: float, dt: float):
    """One-sided spectral density of x^2 for a sampled stationary OU series.

    The autocovariance of x^2 is ``2 A^2 r^|k|`` with ``r = exp(-2 dt / tau)``
    (from :func:`stationary_g2`); its density integrates to ``2 A^2`` over
    ``[0, 1/(2 dt)]``.
    """
    return ar1_spectrum(freqs, 2.0 * A**2, math.exp(-2.0 * dt / tau), dt)


def empirical_g2(x: TimeSeries, max_lag: int) -> CorrelationCurve:
    """Stationary estimate of <x_i^2 x_{i+k}^2> for k = 0..max_lag."""
    n = len(x)
    if max_lag < 0 or max_lag >= n / 4:
        raise ValueError(f"max_lag must be in [0, {n / 4}), got {max_lag}")
    sq = x.values**2
    values = np.array([np.mean(sq[: n - k] * sq[k:]) for k in range(max_lag + 1)])
    return CorrelationCurve(x.dt * np.arange(max_lag + 1), values)


# ---------------------------------------------------------------------------
# shape summaries used by the figure checks
# ---------------------------------------------------------------------------


def loglog_slope(freqs, power, fmin: float, fmax: float) -> float:
    """Least-squares slope of log power against log frequency on [fmin, fmax]."""
    freqs = np.asarray(freqs)
    sel = (freqs >= fmin) & (freqs <= fmax) & (np.asarray(power) > 0)
    if sel.sum() < 3:
        raise ValueError("fewer than three frequencies in the fit band")
    return float(np.polyfit(np.log(freqs[sel]), np.log(np.asarray(power)[sel]), 1)[0])


def fit_lorentzian(freqs, power, fmax: float | None = None):
    """Fit ``P0 / (1 + (f/fc)^2)`` in log space; returns ``(P0, fc)``."""
    freqs = np.asarray(freqs)
    power = np.asarray(power)
    sel = power > 0 if fmax is None else (power > 0) & (freqs <= fmax)
    f, p = freqs[sel], power[sel]

    def model(f, log_p0, log_fc):
        return log_p0 - np.log1p((f / np.exp(log_fc)) ** 2)

    p0 = (math.log(p[:3].mean()), math.log(f[len(f) // 10] + 1e-12))
    (log_p0, log_fc), _ = curve_fit(model, f, np.log(p), p0=p0)
    return math.exp(log_p0), math.exp(log_fc)


def fit_exponential_decay(lags, values):
    """Fit ``c exp(-lags / ell)``; returns ``(c, ell)``."""
    lags = np.asarray(lags)
    values = np.asarray(values)

    def model(t, c, ell):
        return c * np.exp(-t / ell)

    (c, ell), _ = curve_fit(model, lags, values, p0=(values[0], max(lags[-1] / 5.0, 1e-6)), maxfev=10000)
    return float(c), float(ell)
