"""Expectation-Maximization for an OU process observed under thermal noise.

E-step: Gaussian forward (alpha) and backward (beta) messages along the
latent chain give the single-site posteriors p(x_n | y) and the pairwise
cross moments E[x_{n-1} x_n | y].

M-step: with those sufficient statistics the expected complete-data
log-likelihood is maximized exactly.  ``A`` has a closed form given ``B``
and the remaining profile in ``B`` has a stationarity condition that is a
cubic polynomial, solved directly.  ``sigma_N`` is the mean expected squared
residual.

Forward messages are stored in moment form (mean, variance, log scale);
backward messages in information form ``exp(c - P x^2 / 2 + h x)`` so that
the terminal flat message is exactly ``P = h = c = 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .gaussians import LOG_2PI, Gaussian1, _bivariate_moments, _product, _propagate
from .model import OUParams, TimeSeries

B_MIN = 1e-9
B_MAX = 1.0 - 1e-12


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------


@dataclass
class ForwardMessages:
    """alpha(x_n) = exp(log_scale[n]) N(x_n; mean[n], var[n]) = p(y_1..y_n, x_n)."""

    mean: np.ndarray
    var: np.ndarray
    log_scale: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.log_scale[-1])

    def __len__(self):
        return len(self.mean)

    def __getitem__(self, i) -> Gaussian1:
        return Gaussian1(float(self.mean[i]), float(self.var[i]), float(self.log_scale[i]))


@dataclass
class BackwardMessages:
    """beta(x_n) = exp(log_const[n] - precision[n] x^2 / 2 + shift[n] x) = p(y_{n+1}..y_N | x_n)."""

    precision: np.ndarray
    shift: np.ndarray
    log_const: np.ndarray

    def __len__(self):
        return len(self.precision)

    def is_flat(self, i) -> bool:
        return self.precision[i] == 0.0 and self.shift[i] == 0.0 and self.log_const[i] == 0.0

    def __getitem__(self, i) -> Gaussian1 | None:
        """Moment form of beta(x_i); ``None`` for the flat terminal message."""
        p, h, c = float(self.precision[i]), float(self.shift[i]), float(self.log_const[i])
        if p == 0.0:
            return None
        return Gaussian1(h / p, 1.0 / p, c + 0.5 * h * h / p + 0.5 * math.log(2.0 * math.pi / p))

    def logpdf(self, i, x):
        return self.log_const[i] - 0.5 * self.precision[i] * x**2 + self.shift[i] * x


@dataclass
class MessageSet:
    alphas: ForwardMessages
    betas: BackwardMessages

    @property
    def loglik(self) -> float:
        return self.alphas.loglik


@njit(cache=True)
def _forward(y, A, B, r):
    n = y.shape[0]
    mean = np.empty(n)
    var = np.empty(n)
    log_scale = np.empty(n)
    m, v, lc = _product(0.0, A, y[0], r)
    mean[0], var[0], log_scale[0] = m, v, lc
    for i in range(1, n):
        pm, pv = _propagate(mean[i - 1], var[i - 1], A, B)
        m, v, lc = _product(pm, pv, y[i], r)
        mean[i], var[i], log_scale[i] = m, v, log_scale[i - 1] + lc
    return mean, var, log_scale


@njit(cache=True)
def _backward(y, A, B, r):
    n = y.shape[0]
    q = A * (1.0 - B * B)
    prec = np.zeros(n)
    shift = np.zeros(n)
    logc = np.zeros(n)
    obs_c = -0.5 * (LOG_2PI + math.log(r))
    for i in range(n - 2, -1, -1):
        # fold in p(y_{i+1} | x_{i+1}), then integrate the transition out
        p1 = prec[i + 1] + 1.0 / r
        h1 = shift[i + 1] + y[i + 1] / r
        c1 = logc[i + 1] + obs_c - 0.5 * y[i + 1] * y[i + 1] / r
        k = 1.0 + q * p1
        prec[i] = B * B * p1 / k
        shift[i] = B * h1 / k
        logc[i] = c1 - 0.5 * math.log(k) + 0.5 * q * h1 * h1 / k
    return prec, shift, logc


@njit(cache=True)
def _marginals(fm, fv, bp, bh):
    n = fm.shape[0]
    mu = np.empty(n)
    var = np.empty(n)
    for i in range(n):
        p = 1.0 / fv[i] + bp[i]
        var[i] = 1.0 / p
        mu[i] = (fm[i] / fv[i] + bh[i]) / p
    return mu, var


@njit(cache=True)
def _pairwise(fm, fv, bp, bh, y, A, B, r):
    n = fm.shape[0]
    exx = np.empty(n - 1)
    for i in range(n - 1):
        p1 = bp[i + 1] + 1.0 / r
        h1 = bh[i + 1] + y[i + 1] / r
        mx, my, vx, vy, cxy = _bivariate_moments(fm[i], fv[i], h1 / p1, 1.0 / p1, A, B)
        exx[i] = cxy + mx * my
    return exx


def _check_inputs(y: TimeSeries, sigma_N: float):
    if len(y) < 1:
        raise ValueError("empty series")
    if not (sigma_N > 0 and math.isfinite(sigma_N)):
        raise ValueError(f"sigma_N must be positive and finite, got {sigma_N!r}")
    if not np.all(np.isfinite(y.values)):
        raise ValueError("series contains non-finite values")


def forward_messages(y: TimeSeries, params: OUParams, sigma_N: float) -> ForwardMessages:
    _check_inputs(y, sigma_N)
    B = params.B(y.dt)
    return ForwardMessages(*_forward(y.values, params.A, B, sigma_N**2))


def backward_messages(y: TimeSeries, params: OUParams, sigma_N: float) -> BackwardMessages:
    _check_inputs(y, sigma_N)
    B = params.B(y.dt)
    return BackwardMessages(*_backward(y.values, params.A, B, sigma_N**2))


def messages(y: TimeSeries, params: OUParams, sigma_N: float) -> MessageSet:
    return MessageSet(forward_messages(y, params, sigma_N), backward_messages(y, params, sigma_N))


def posterior_marginals(alphas: ForwardMessages, betas: BackwardMessages):
    """Posterior means and variances of each x_n (normalized alpha * beta)."""
    if len(alphas) != len(betas):
        raise ValueError("forward and backward message sets differ in length")
    return _marginals(alphas.mean, alphas.var, betas.precision, betas.shift)


def pairwise_cross_moments(alphas: ForwardMessages, betas: BackwardMessages, y: TimeSeries, params: OUParams, sigma_N: float):
    """E[x_{n-1} x_n | y] for n = 2..N, as an array of length N - 1."""
    if not (len(alphas) == len(betas) == len(y)):
        raise ValueError("message sets and series differ in length")
    return _pairwise(alphas.mean, alphas.var, betas.precision, betas.shift, y.values, params.A, params.B(y.dt), sigma_N**2)


# ---------------------------------------------------------------------------
# sufficient statistics and M-step
# ---------------------------------------------------------------------------


@dataclass
class PosteriorMoments:
    mu: np.ndarray
    var: np.ndarray
    e_x1_sq: float
    e_xN_sq: float
    sum_e_x_sq: float
    sum_e_xx_next: float
    sum_e_resid_sq: float  # sum_i E[(x_i - y_i)^2]

    @classmethod
    def from_latent(cls, x, y) -> "PosteriorMoments":
        """Moments of a fully known latent path (zero posterior variance)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(
            mu=x,
            var=np.zeros_like(x),
            e_x1_sq=float(x[0] ** 2),
            e_xN_sq=float(x[-1] ** 2),
            sum_e_x_sq=float(np.sum(x**2)),
            sum_e_xx_next=float(np.sum(x[:-1] * x[1:])),
            sum_e_resid_sq=float(np.sum((x - y) ** 2)),
        )


def posterior_moments(y: TimeSeries, params: OUParams, sigma_N: float):
    """Run one E-step; returns ``(PosteriorMoments, loglik)``."""
    msgs = messages(y, params, sigma_N)
    mu, var = posterior_marginals(msgs.alphas, msgs.betas)
    exx = pairwise_cross_moments(msgs.alphas, msgs.betas, y, params, sigma_N)
    ex2 = var + mu**2
    resid = var + mu**2 + y.values**2 - 2.0 * mu * y.values
    moments = PosteriorMoments(
        mu=mu,
        var=var,
        e_x1_sq=float(ex2[0]),
        e_xN_sq=float(ex2[-1]),
        sum_e_x_sq=float(ex2.sum()),
        sum_e_xx_next=float(exx.sum()),
        sum_e_resid_sq=float(resid.sum()),
    )
    return moments, msgs.loglik


def _transition_residual(m: PosteriorMoments, B):
    # sum_{i<N} E[(x_{i+1} - B x_i)^2]
    return (m.sum_e_x_sq - m.e_x1_sq) - 2.0 * B * m.sum_e_xx_next + B * B * (m.sum_e_x_sq - m.e_xN_sq)


def _amplitude_given_B(m: PosteriorMoments, n: int, B):
    return (m.e_x1_sq + _transition_residual(m, B) / (1.0 - B * B)) / n


def expected_complete_loglik(m: PosteriorMoments, n: int, A: float, B: float) -> float:
    """Latent-chain part of Q(theta, theta_old) as a function of (A, B)."""
    w = m.e_x1_sq + _transition_residual(m, B) / (1.0 - B * B)
    return -0.5 * n * (LOG_2PI + math.log(A)) - 0.5 * (n - 1) * math.log(1.0 - B * B) - 0.5 * w / A


def maximize_transition(m: PosteriorMoments, n: int):
    """Maximize Q over (A, B); returns ``(A, B, interior)``.

    Profiling A out leaves ``-n/2 log P(B) + 1/2 log(1 - B^2)`` with
    ``P(B) = S - 2 C B + K B^2``; its stationary points are the roots of
    ``(n-1) K B^3 - (n-2) C B^2 - (n K + S) B + n C``.
    """
    S, C = m.sum_e_x_sq, m.sum_e_xx_next
    K = S - m.e_x1_sq - m.e_xN_sq

    def profile(b):
        p = S - 2.0 * C * b + K * b * b
        return -0.5 * n * math.log(p) + 0.5 * math.log(1.0 - b * b) if p > 0 else -math.inf

    roots = np.roots([(n - 1) * K, -(n - 2) * C, -(n * K + S), n * C])
    cands = [float(r.real) for r in roots if abs(r.imag) < 1e-10 * max(1.0, abs(r.real)) and B_MIN < r.real < B_MAX]
    interior = bool(cands)
    if not cands:
        cands = [B_MIN]
    B = max(cands, key=profile)
    if profile(B_MIN) > profile(B):
        B, interior = B_MIN, False
    return _amplitude_given_B(m, n, B), B, interior


def m_step(moments: PosteriorMoments, n: int, dt: float):
    """Returns ``(OUParams, sigma_N, interior)``; ``interior`` is False if B hit a bound."""
    A, B, interior = maximize_transition(moments, n)
    tau = -dt / math.log(B)
    sigma_N = math.sqrt(max(moments.sum_e_resid_sq / n, 0.0))
    return OUParams(A, tau), sigma_N, interior


def transition_hessian(m: PosteriorMoments, n: int, A: float, B: float) -> np.ndarray:
    """Analytic Hessian of :func:`expected_complete_loglik` in (A, B)."""
    u = 1.0 - B * B
    a0 = m.sum_e_x_sq - m.e_x1_sq
    b0 = m.sum_e_x_sq - m.e_xN_sq
    C = m.sum_e_xx_next
    R = a0 - 2.0 * B * C + B * B * b0
    R1 = -2.0 * C + 2.0 * b0 * B
    R2 = 2.0 * b0
    W = m.e_x1_sq + R / u
    W1 = R1 / u + 2.0 * B * R / u**2
    W2 = R2 / u + 4.0 * B * R1 / u**2 + 2.0 * R / u**2 + 8.0 * B * B * R / u**3
    h_aa = 0.5 * n / A**2 - W / A**3
    h_ab = 0.5 * W1 / A**2
    h_bb = (n - 1) * (1.0 + B * B) / u**2 - 0.5 * W2 / A
    return np.array([[h_aa, h_ab], [h_ab, h_bb]])


def laplace_errors(m: PosteriorMoments, n: int, A: float, B: float, dt: float):
    """(dA, dtau) from the inverse negative curvature of Q at its maximum."""
    H = transition_hessian(m, n, A, B)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return math.nan, math.nan
    if cov[0, 0] <= 0 or cov[1, 1] <= 0:
        return math.nan, math.nan
    dtau_dB = dt / (B * math.log(B) ** 2)
    return math.sqrt(cov[0, 0]), abs(dtau_dB) * math.sqrt(cov[1, 1])


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class EMConfig:
    max_iters: int = 500
    tol: float = 1e-8
    n_starts: int = 1
    init_strategy: str = "from-data-moments"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.init_strategy not in ("from-data-moments", "randomized"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")


@dataclass
class FitResult:
    params: OUParams
    sigma_N: float
    dA: float
    dtau: float
    dsigma_N: float
    loglik: float
    iterations: int
    converged: bool
    start_index: int = 0
    loglik_trace: list = field(default_factory=list, repr=False)
    message: str = ""

    @property
    def A(self):
        return self.params.A

    @property
    def tau(self):
        return self.params.tau

    def to_dict(self) -> dict:
        return {
            "A": self.params.A,
            "tau": self.params.tau,
            "sigma_N": self.sigma_N,
            "dA": self.dA,
            "dtau": self.dtau,
            "dsigma_N": self.dsigma_N,
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def initial_guess(y: TimeSeries):
    """(A, B, sigma_N) from the sample moments of the observations."""
    v = y.values
    var = float(np.var(v))
    c = v - v.mean()
    rho1 = float(np.dot(c[:-1], c[1:]) / np.dot(c, c)) if np.dot(c, c) > 0 else 0.5
    B = min(max(rho1, 0.05), 0.95)
    return max(var, 1e-12), B, 0.5 * math.sqrt(max(var, 1e-24))


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _run(y: TimeSeries, A, B, sigma_N, config: EMConfig, start_index: int) -> FitResult:
    n = len(y)
    params = OUParams(A, -y.dt / math.log(B))
    trace = []
    converged = False
    interior = True
    moments = None
    it = 0
    for it in range(1, config.max_iters + 1):
        moments, ll = posterior_moments(y, params, sigma_N)
        trace.append(ll)
        new_params, new_sigma, interior = m_step(moments, n, y.dt)
        if new_sigma <= 0 or not interior:
            params, sigma_N = new_params, max(new_sigma, 1e-300)
            break
        small = (
            _rel(new_params.A, params.A) < config.tol
            and _rel(new_params.tau, params.tau) < config.tol
            and _rel(new_sigma, sigma_N) < config.tol
            and (len(trace) > 1 and _rel(trace[-1], trace[-2]) < config.tol)
        )
        params, sigma_N = new_params, new_sigma
        if small:
            converged = True
            break
    # statistics at the final parameters, for the error estimates
    moments, ll = posterior_moments(y, params, sigma_N)
    trace.append(ll)
    dA, dtau = laplace_errors(moments, n, params.A, params.B(y.dt), y.dt)
    message = "" if converged else ("transition coefficient hit its bound" if not interior else "max_iters reached")
    return FitResult(
        params=params,
        sigma_N=sigma_N,
        dA=dA,
        dtau=dtau,
        dsigma_N=sigma_N / math.sqrt(2.0 * n),
        loglik=ll,
        iterations=it,
        converged=converged,
        start_index=start_index,
        loglik_trace=trace,
        message=message,
    )


def fit(y: TimeSeries, config: EMConfig | None = None) -> FitResult:
    """Fit (A, tau, sigma_N) by EM; returns the best-loglik run over all starts.

    Start 0 uses the data moments unless ``init_strategy == "randomized"``;
    the other starts multiply each initial value by an independent
    ``U(0.5, 2)`` factor.  A non-converged start is only returned if no
    start converged, and then carries ``converged=False``.
    """
    config = config or EMConfig()
    if len(y) < 2:
        raise ValueError("series must contain at least two samples")
    if not np.all(np.isfinite(y.values)):
        raise ValueError("series contains non-finite values")
    A0, B0, s0 = initial_guess(y)
    rng = np.random.default_rng(config.seed)
    results = []
    for k in range(config.n_starts):
        if k == 0 and config.init_strategy == "from-data-moments":
            A, B, s = A0, B0, s0
        else:
            f = rng.uniform(0.5, 2.0, size=3)
            A, B, s = A0 * f[0], min(max(B0 * f[1], 0.01), 0.99), s0 * f[2]
        results.append(_run(y, A, B, s, config, k))
    pool = [r for r in results if r.converged] or results
    return max(pool, key=lambda r: r.loglik if math.isfinite(r.loglik) else -math.inf)
