"""No-U-turn Hamiltonian Monte Carlo with warmup adaptation.

Multinomial trajectory sampling with the generalized U-turn criterion
(including the extra checks across merged sub-trees), dual-averaging step
size adaptation and a windowed diagonal mass matrix, following the usual
warmup schedule: a fast initial buffer, doubling slow windows that estimate
the metric, and a fast terminal buffer.

The target is any callable ``logp_grad(q) -> (logp, grad)``; ``logp`` may be
``-inf`` (treated as a divergence).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

MAX_ENERGY_ERROR = 1000.0


@dataclass
class SamplerConfig:
    n_samples: int = 1000
    n_warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    step_size: float | None = None  # initial value; adapted during warmup
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class Chain:
    draws: np.ndarray  # (n_samples, dim)
    names: list
    ess: dict
    rhat: dict
    divergences: int
    runtime_s: float
    step_size: float
    inv_metric: np.ndarray = field(repr=False)
    tree_depth: np.ndarray = field(repr=False)
    accept_stat: np.ndarray = field(repr=False)
    n_leapfrog: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    warmup_divergences: int = 0

    def __getitem__(self, name) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    @property
    def divergence_rate(self) -> float:
        return self.divergences / len(self.draws)

    @property
    def flagged(self) -> bool:
        """True when more than 10% of retained transitions diverged."""
        return self.divergence_rate > 0.10

    def mean(self, name) -> float:
        return float(np.mean(self[name]))

    def sd(self, name) -> float:
        return float(np.std(self[name], ddof=1))

    def interval(self, name, level=0.95):
        lo = (1.0 - level) / 2.0
        return tuple(float(v) for v in np.quantile(self[name], [lo, 1.0 - lo]))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    return np.fft.irfft(f * np.conj(f), m)[:n] / n


def effective_sample_size(x) -> float:
    """Single-chain ESS with Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    acov = _autocov(x)
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    # sums over consecutive pairs, truncated at the first negative pair
    pairs = []
    for t in range(0, n - 1, 2):
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pairs.append(s)
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / math.log10(max(n, 10))))


def split_rhat(x) -> float:
    x = np.asarray(x, dtype=float)
    half = len(x) // 2
    if half < 2:
        return math.nan
    parts = np.stack([x[:half], x[len(x) - half :]])
    w = parts.var(axis=1, ddof=1).mean()
    b = half * parts.mean(axis=1).var(ddof=1)
    if w <= 0:
        return math.nan
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


# ---------------------------------------------------------------------------
# trajectory building
# ---------------------------------------------------------------------------


class _Point:
    __slots__ = ("q", "p", "grad", "logp")

    def __init__(self, q, p, grad, logp):
        self.q, self.p, self.grad, self.logp = q, p, grad, logp


class _Tree:
    __slots__ = ("left", "right", "proposal", "log_w", "rho", "n_leapfrog", "sum_accept", "diverging", "turning")


class _Integrator:
    def __init__(self, logp_grad, inv_metric, rng):
        self.logp_grad = logp_grad
        self.inv_metric = inv_metric
        self.rng = rng
        self.n_leapfrog = 0

    def kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_metric * p))

    def energy(self, z: _Point):
        return -z.logp + self.kinetic(z.p)

    def leapfrog(self, z: _Point, eps):
        self.n_leapfrog += 1
        p = z.p + 0.5 * eps * z.grad
        q = z.q + eps * self.inv_metric * p
        logp, grad = self.logp_grad(q)
        if not math.isfinite(logp):
            return _Point(q, p, z.grad, -math.inf)
        p = p + 0.5 * eps * grad
        return _Point(q, p, grad, logp)

    def no_turn(self, p_sharp_left, p_sharp_right, rho):
        return float(np.dot(p_sharp_left, rho)) > 0 and float(np.dot(p_sharp_right, rho)) > 0

    def build(self, z: _Point, direction, depth, eps, h0) -> _Tree:
        if depth == 0:
            z1 = self.leapfrog(z, direction * eps)
            h = self.energy(z1) if math.isfinite(z1.logp) else math.inf
            if math.isnan(h):
                h = math.inf
            t = _Tree()
            t.left = t.right = t.proposal = z1
            t.log_w = h0 - h
            t.rho = z1.p
            t.n_leapfrog = 1
            t.sum_accept = math.exp(min(0.0, h0 - h))
            t.diverging = (h - h0) > MAX_ENERGY_ERROR
            t.turning = False
            return t
        first = self.build(z, direction, depth - 1, eps, h0)
        if first.diverging or first.turning:
            return first
        start = first.right if direction > 0 else first.left
        second = self.build(start, direction, depth - 1, eps, h0)
        t = _Tree()
        t.n_leapfrog = first.n_leapfrog + second.n_leapfrog
        t.sum_accept = first.sum_accept + second.sum_accept
        if second.diverging or second.turning:
            t.left, t.right, t.proposal = first.left, first.right, first.proposal
            t.log_w, t.rho = first.log_w, first.rho
            t.diverging, t.turning = second.diverging, second.turning
            return t
        left, right = (first, second) if direction > 0 else (second, first)
        t.left, t.right = left.left, right.right
        t.log_w = np.logaddexp(first.log_w, second.log_w)
        # progressive multinomial sampling within the subtree
        if math.log(self.rng.uniform()) < second.log_w - t.log_w:
            t.proposal = second.proposal
        else:
            t.proposal = first.proposal
        t.rho = left.rho + right.rho
        t.diverging = False
        m = self.inv_metric
        turning = not self.no_turn(m * t.left.p, m * t.right.p, t.rho)
        if not turning:
            rho_a = left.rho + right.left.p
            turning = not self.no_turn(m * left.left.p, m * right.left.p, rho_a)
        if not turning:
            rho_b = left.right.p + right.rho
            turning = not self.no_turn(m * left.right.p, m * right.right.p, rho_b)
        t.turning = turning
        return t

    def transition(self, z0: _Point, eps, max_depth):
        """One NUTS transition; returns (new point, depth, accept_stat, diverged)."""
        p0 = self.rng.standard_normal(len(z0.q)) / np.sqrt(self.inv_metric)
        z = _Point(z0.q, p0, z0.grad, z0.logp)
        h0 = self.energy(z)
        left = right = z
        proposal = z
        log_w = 0.0
        rho = z.p.copy()
        n_leap = 0
        sum_accept = 0.0
        diverged = False
        depth = 0
        m = self.inv_metric
        while depth < max_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            start = right if direction > 0 else left
            sub = self.build(start, direction, depth, eps, h0)
            depth += 1
            n_leap += sub.n_leapfrog
            sum_accept += sub.sum_accept
            if sub.diverging:
                diverged = True
                break
            if sub.turning:
                break
            # biased progressive sampling across the doubling
            if math.log(self.rng.uniform()) < sub.log_w - log_w:
                proposal = sub.proposal
            log_w = np.logaddexp(log_w, sub.log_w)
            # L and R are the two halves of the doubled trajectory in time order
            if direction > 0:
                l_ends, r_ends = (left, right), (sub.left, sub.right)
                rho_l, rho_r = rho, sub.rho
                right = sub.right
            else:
                l_ends, r_ends = (sub.left, sub.right), (left, right)
                rho_l, rho_r = sub.rho, rho
                left = sub.left
            rho = rho_l + rho_r
            if not self.no_turn(m * left.p, m * right.p, rho):
                break
            if not self.no_turn(m * l_ends[0].p, m * r_ends[0].p, rho_l + r_ends[0].p):
                break
            if not self.no_turn(m * l_ends[1].p, m * r_ends[1].p, l_ends[1].p + rho_r):
                break
        return proposal, depth, sum_accept / max(n_leap, 1), diverged


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def _warmup_windows(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """End indices (exclusive) of the slow metric-adaptation windows."""
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return [(init_buffer if i == 0 else ends[i - 1], e) for i, e in enumerate(ends)]


def _initial_step_size(integ: _Integrator, z: _Point):
    eps = 1.0
    p = integ.rng.standard_normal(len(z.q)) / np.sqrt(integ.inv_metric)
    z = _Point(z.q, p, z.grad, z.logp)
    h0 = integ.energy(z)

    def log_accept(e):
        z1 = integ.leapfrog(z, e)
        if not math.isfinite(z1.logp):
            return -math.inf
        d = h0 - integ.energy(z1)
        return d if math.isfinite(d) else -math.inf

    direction = 1 if log_accept(eps) > math.log(0.5) else -1
    for _ in range(100):
        nxt = eps * (2.0 if direction > 0 else 0.5)
        la = log_accept(nxt)
        if direction > 0 and not la > math.log(0.5):
            break
        eps = nxt
        if direction < 0 and la > math.log(0.5):
            break
    return eps


def sample(logp_grad, q0, config: SamplerConfig, names=None, keep=None) -> Chain:
    """Draw ``config.n_samples`` post-warmup states of a NUTS chain.

    ``keep`` optionally selects which coordinates are stored (e.g. only the
    parameters of a model with many latent states); diagnostics are computed
    for the stored coordinates.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    q0 = np.asarray(q0, dtype=float).copy()
    dim = len(q0)
    names = list(names) if names is not None else [f"q{i}" for i in range(dim)]
    keep = np.arange(dim) if keep is None else np.asarray(keep)
    logp, grad = logp_grad(q0)
    if not math.isfinite(logp):
        raise ValueError("initial point has non-finite log density")
    inv_metric = np.ones(dim)
    integ = _Integrator(logp_grad, inv_metric, rng)
    z = _Point(q0, np.zeros(dim), grad, logp)
    eps = config.step_size or _initial_step_size(integ, z)
    da = _DualAveraging(eps, config.target_accept)

    windows = _warmup_windows(config.n_warmup)
    window_of = {}
    for w_start, w_end in windows:
        window_of[w_end - 1] = (w_start, w_end)
    slow_lo = windows[0][0] if windows else config.n_warmup
    slow_hi = windows[-1][1] if windows else config.n_warmup
    welford_n, welford_mean, welford_m2 = 0, np.zeros(dim), np.zeros(dim)
    warm_div = 0

    for it in range(config.n_warmup):
        z, _, acc, div = integ.transition(z, eps, config.max_tree_depth)
        warm_div += div
        eps = da.update(acc)
        if slow_lo <= it < slow_hi:
            welford_n += 1
            d = z.q - welford_mean
            welford_mean += d / welford_n
            welford_m2 += d * (z.q - welford_mean)
            if it in window_of:
                var = welford_m2 / max(welford_n - 1, 1)
                n = welford_n
                inv_metric[:] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                welford_n, welford_mean, welford_m2 = 0, np.zeros(dim), np.zeros(dim)
                eps = _initial_step_size(integ, z)
                da.restart(eps)
    if config.n_warmup > 0:
        eps = da.final

    draws = np.empty((config.n_samples, len(keep)))
    depths = np.empty(config.n_samples, dtype=int)
    accepts = np.empty(config.n_samples)
    n_div = 0
    leap_before = integ.n_leapfrog
    for i in range(config.n_samples):
        z, depth, acc, div = integ.transition(z, eps, config.max_tree_depth)
        draws[i] = z.q[keep]
        depths[i] = depth
        accepts[i] = acc
        n_div += div
    kept_names = [names[k] for k in keep]
    ess = {nm: effective_sample_size(draws[:, j]) for j, nm in enumerate(kept_names)}
    rhat = {nm: split_rhat(draws[:, j]) for j, nm in enumerate(kept_names)}
    return Chain(
        draws=draws,
        names=kept_names,
        ess=ess,
        rhat=rhat,
        divergences=int(n_div),
        runtime_s=time.perf_counter() - t_start,
        step_size=float(eps),
        inv_metric=inv_metric.copy(),
        tree_depth=depths,
        accept_stat=accepts,
        n_leapfrog=integ.n_leapfrog - leap_before,
        seed=config.seed,
        config={
            "n_samples": config.n_samples,
            "n_warmup": config.n_warmup,
            "target_accept": config.target_accept,
            "max_tree_depth": config.max_tree_depth,
            "seed": config.seed,
        },
        warmup_divergences=int(warm_div),
    )
