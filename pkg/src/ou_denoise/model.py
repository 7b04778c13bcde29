"""Ornstein-Uhlenbeck latent chain with thermal and multiplicative measurement noise.

Latent dynamics (zero drift, uniform step ``dt``)::

    x_1     ~ N(0, A)
    x_{i+1} ~ N(B x_i, A (1 - B^2)),    B = exp(-dt / tau)

Observations::

    y_i ~ N(x_i, sigma_N^2 + sigma_M^2 x_i^2)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.signal import lfilter

from .gaussians import LOG_2PI


@dataclass(frozen=True)
class OUParams:
    A: float
    tau: float

    def __post_init__(self):
        if not (self.A > 0 and math.isfinite(self.A)):
            raise ValueError(f"A must be positive and finite, got {self.A!r}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau!r}")

    def B(self, dt: float) -> float:
        return math.exp(-dt / self.tau)


@dataclass(frozen=True)
class NoiseParams:
    sigma_N: float = 0.0
    sigma_M: float = 0.0

    def __post_init__(self):
        if not (self.sigma_N >= 0 and math.isfinite(self.sigma_N)):
            raise ValueError(f"sigma_N must be >= 0, got {self.sigma_N!r}")
        if not (self.sigma_M >= 0 and math.isfinite(self.sigma_M)):
            raise ValueError(f"sigma_M must be >= 0, got {self.sigma_M!r}")

    def ratio(self, second_moment: float) -> float:
        """Multiplicative-to-thermal variance ratio ``E[x^2] sigma_M^2 / sigma_N^2``."""
        if self.sigma_N == 0:
            return math.inf if self.sigma_M > 0 else 0.0
        return second_moment * self.sigma_M**2 / self.sigma_N**2

    @classmethod
    def from_ratio(cls, total: float, rho: float, second_moment: float = 1.0) -> "NoiseParams":
        """Split a total noise magnitude between the two sources at ratio ``rho``.

        ``total^2 = sigma_N^2 + E[x^2] sigma_M^2`` with ``E[x^2] sigma_M^2 = rho sigma_N^2``.
        ``rho = inf`` gives pure multiplicative noise.
        """
        if rho < 0:
            raise ValueError("rho must be >= 0")
        if math.isinf(rho):
            return cls(0.0, total / math.sqrt(second_moment))
        sn2 = total**2 / (1.0 + rho)
        return cls(math.sqrt(sn2), math.sqrt(rho * sn2 / second_moment))


@dataclass
class TimeSeries:
    dt: float
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt!r}")

    def __len__(self):
        return len(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.values))

    def reversed(self) -> "TimeSeries":
        return TimeSeries(self.dt, self.values[::-1].copy(), self.seed)

    # -- serialization -------------------------------------------------------

    def to_json(self, path=None) -> str:
        text = json.dumps({"dt": self.dt, "seed": self.seed, "values": [float(v) for v in self.values]})
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "TimeSeries":
        d = json.loads(text)
        return cls(float(d["dt"]), np.array(d["values"], dtype=float), d.get("seed"))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "value"])
            for i, v in enumerate(self.values):
                w.writerow([repr(i * self.dt), repr(float(v))])

    @classmethod
    def from_csv(cls, path, seed: int | None = None) -> "TimeSeries":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) < 2:
            raise ValueError(f"{path}: need at least two rows to infer dt")
        t = np.array([float(r["t"]) for r in rows])
        values = np.array([float(r["value"]) for r in rows])
        steps = np.diff(t)
        dt = float(steps[0])
        if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
            raise ValueError(f"{path}: sampling grid is not uniform")
        return cls(dt, values, seed)


def load_series(path) -> TimeSeries:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return TimeSeries.from_json(path.read_text())
    return TimeSeries.from_csv(path)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_latent(params: OUParams, n: int, dt: float, rng_seed: int) -> TimeSeries:
    """Exact discretization of the OU process started from stationarity."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    rng = np.random.default_rng(rng_seed)
    B = params.B(dt)
    z = rng.standard_normal(n)
    e = np.empty(n)
    e[0] = math.sqrt(params.A) * z[0]
    e[1:] = math.sqrt(params.A * (1.0 - B * B)) * z[1:]
    x = lfilter([1.0], [1.0, -B], e)
    return TimeSeries(dt, x, rng_seed)


def add_noise(x: TimeSeries, noise: NoiseParams, rng_seed: int) -> TimeSeries:
    """Independent Gaussian measurement error with variance sigma_N^2 + sigma_M^2 x^2."""
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(len(x))
    sd = np.sqrt(noise.sigma_N**2 + noise.sigma_M**2 * x.values**2)
    return TimeSeries(x.dt, x.values + sd * z, rng_seed)


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------


@njit(cache=True)
def _innovations_loglik(y, A, B, r):
    # prediction-error decomposition of the Kalman filter
    m, v = 0.0, A
    q = A * (1.0 - B * B)
    total = 0.0
    for i in range(y.shape[0]):
        if i > 0:
            m = B * m
            v = B * B * v + q
        s = v + r
        e = y[i] - m
        total += -0.5 * (LOG_2PI + math.log(s) + e * e / s)
        k = v / s
        m = m + k * e
        v = v * r / s
    return total


def marginal_loglik_additive(y: TimeSeries, params: OUParams, sigma_N: float) -> float:
    """log p(y | A, tau, sigma_N) with the latent chain integrated out exactly."""
    if not (sigma_N > 0 and math.isfinite(sigma_N)):
        raise ValueError(f"sigma_N must be positive and finite, got {sigma_N!r}")
    if not np.all(np.isfinite(y.values)):
        raise ValueError("series contains non-finite values")
    return float(_innovations_loglik(y.values, params.A, params.B(y.dt), sigma_N * sigma_N))


@njit(cache=True)
def _joint_core(y, x, A, B, sn2, sm2, grad_x):
    """Joint log density and partials w.r.t. x, A, B, sigma_N^2, sigma_M^2.

    ``grad_x`` is overwritten.
    """
    n = y.shape[0]
    q = A * (1.0 - B * B)
    lp = 0.0
    d_sn2 = 0.0
    d_sm2 = 0.0
    # observation terms
    if sm2 == 0.0:
        # constant variance: one log for the whole series
        ss = 0.0
        for i in range(n):
            r = y[i] - x[i]
            ss += r * r
            grad_x[i] = r / sn2
        lp += -0.5 * n * (LOG_2PI + math.log(sn2)) - 0.5 * ss / sn2
        d_sn2 = -0.5 * n / sn2 + 0.5 * ss / (sn2 * sn2)
        for i in range(n):
            d_sm2 += (-0.5 / sn2 + 0.5 * (y[i] - x[i]) ** 2 / (sn2 * sn2)) * x[i] * x[i]
    else:
        for i in range(n):
            xi = x[i]
            v = sn2 + sm2 * xi * xi
            r = y[i] - xi
            lp += -0.5 * (LOG_2PI + math.log(v)) - 0.5 * r * r / v
            gv = -0.5 / v + 0.5 * r * r / (v * v)
            grad_x[i] = r / v + gv * 2.0 * sm2 * xi
            d_sn2 += gv
            d_sm2 += gv * xi * xi
    # stationary first sample
    lp += -0.5 * (LOG_2PI + math.log(A)) - 0.5 * x[0] * x[0] / A
    grad_x[0] -= x[0] / A
    d_A = -0.5 / A + 0.5 * x[0] * x[0] / (A * A)
    # transitions
    see = 0.0
    sex = 0.0
    for i in range(n - 1):
        e = x[i + 1] - B * x[i]
        see += e * e
        sex += e * x[i]
        grad_x[i + 1] -= e / q
        grad_x[i] += B * e / q
    m = n - 1
    lp += -0.5 * m * (LOG_2PI + math.log(q)) - 0.5 * see / q
    d_q = -0.5 * m / q + 0.5 * see / (q * q)
    d_A += d_q * (1.0 - B * B)
    d_B = d_q * (-2.0 * A * B) + sex / q
    return lp, d_A, d_B, d_sn2, d_sm2


def joint_logdensity_and_gradient(y: TimeSeries, x, params: OUParams, noise: NoiseParams):
    """log p(x, y | A, tau, sigma_N, sigma_M) and its gradient.

    The gradient is ordered ``(x_1..x_N, log A, log tau, log sigma_N, log sigma_M)``.
    Components for a zero noise amplitude are reported as 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != y.values.shape:
        raise ValueError(f"latent length {x.shape} does not match series length {y.values.shape}")
    if noise.sigma_N == 0 and noise.sigma_M == 0:
        raise ValueError("at least one noise amplitude must be positive")
    B = params.B(y.dt)
    n = len(y)
    grad = np.empty(n + 4)
    lp, dA, dB, dsn2, dsm2 = _joint_core(y.values, x, params.A, B, noise.sigma_N**2, noise.sigma_M**2, grad[:n])
    grad[n] = dA * params.A
    grad[n + 1] = dB * (-B * math.log(B))
    grad[n + 2] = dsn2 * 2.0 * noise.sigma_N**2
    grad[n + 3] = dsm2 * 2.0 * noise.sigma_M**2
    return float(lp), grad
