"""Joint latent/parameter posterior sampling for the noisy OU model.

The sampled coordinates are the latent path ``x_1..x_N`` followed by the
logs of the free positive parameters.  Priors are uniform on boxes in the
original (positive) parameterization, so the log density carries the
log-Jacobian ``sum(log theta)`` of the exp transform.

Noise modes:

``additive-only``        free sigma_N, sigma_M = 0
``multiplicative-only``  free sigma_M, sigma_N = 0
``mixed-free``           both free
``mixed-known-ratio``    free sigma_N; sigma_M^2 = rho sigma_N^2 / A
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import em
from .model import OUParams, TimeSeries, _joint_core
from .nuts import Chain, SamplerConfig, sample as nuts_sample

NOISE_MODES = ("additive-only", "multiplicative-only", "mixed-free", "mixed-known-ratio")


@dataclass
class PriorBox:
    A_max: float
    tau_min: float
    tau_max: float
    sigma_N_max: float
    sigma_M_max: float

    @classmethod
    def default(cls, y: TimeSeries) -> "PriorBox":
        var = float(np.var(y.values))
        n = len(y)
        return cls(
            A_max=25.0 * var,
            tau_min=y.dt / 100.0,
            tau_max=100.0 * n * y.dt,
            sigma_N_max=5.0 * math.sqrt(var),
            sigma_M_max=5.0,
        )

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class ModelSpec:
    noise_mode: str = "additive-only"
    known_ratio: float | None = None
    priors: PriorBox | None = None

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.noise_mode!r}; expected one of {NOISE_MODES}")
        if self.noise_mode == "mixed-known-ratio":
            if self.known_ratio is None:
                raise ValueError("mixed-known-ratio requires known_ratio")
            if not (self.known_ratio >= 0 and math.isfinite(self.known_ratio)):
                raise ValueError(f"known_ratio must be finite and >= 0, got {self.known_ratio!r}")
        if self.priors is not None:
            p = self.priors
            if not (0 < p.A_max < math.inf and 0 < p.tau_min < p.tau_max < math.inf
                    and 0 < p.sigma_N_max < math.inf and 0 < p.sigma_M_max < math.inf):
                raise ValueError("prior bounds must be positive-width and finite")


class Target:
    """Differentiable log posterior over ``(x, log params)``.

    Calling the target returns ``(logp, grad)``; ``logp`` is ``-inf``
    outside the prior box.
    """

    def __init__(self, y: TimeSeries, spec: ModelSpec):
        if len(y) < 2:
            raise ValueError("series must contain at least two samples")
        if not np.all(np.isfinite(y.values)):
            raise ValueError("series contains non-finite values")
        self.y = y
        self.spec = spec
        self.priors = spec.priors or PriorBox.default(y)
        self.n = len(y)
        self.param_names = ["A", "tau"]
        if spec.noise_mode in ("additive-only", "mixed-free", "mixed-known-ratio"):
            self.param_names.append("sigma_N")
        if spec.noise_mode in ("multiplicative-only", "mixed-free"):
            self.param_names.append("sigma_M")
        self.dim = self.n + len(self.param_names)

    @property
    def names(self):
        return [f"x{i}" for i in range(self.n)] + [f"log_{p}" for p in self.param_names]

    @property
    def param_slice(self):
        return slice(self.n, self.dim)

    def params(self, z) -> dict:
        """Positive-scale parameter values at coordinates ``z`` (incl. derived sigma_M)."""
        u = dict(zip(self.param_names, np.exp(z[self.n :])))
        mode = self.spec.noise_mode
        if mode == "multiplicative-only":
            u["sigma_N"] = 0.0
        if mode == "additive-only":
            u["sigma_M"] = 0.0
        if mode == "mixed-known-ratio":
            u["sigma_M"] = math.sqrt(self.spec.known_ratio * u["sigma_N"] ** 2 / u["A"])
        return u

    def pack(self, x, A, tau, sigma_N=None, sigma_M=None) -> np.ndarray:
        """Sampler coordinates for a latent path and positive parameter values."""
        vals = {"A": A, "tau": tau, "sigma_N": sigma_N, "sigma_M": sigma_M}
        return np.concatenate([np.asarray(x, dtype=float), np.log([vals[p] for p in self.param_names])])

    def in_box(self, A, tau, sn, sm) -> bool:
        p = self.priors
        return A <= p.A_max and p.tau_min < tau <= p.tau_max and sn <= p.sigma_N_max and sm <= p.sigma_M_max

    def __call__(self, z):
        n = self.n
        mode = self.spec.noise_mode
        logs = z[n:]
        # far outside any prior box; also keeps exp() from overflowing
        if not (np.all(np.isfinite(z)) and np.max(logs) < 300.0):
            return -math.inf, np.zeros(self.dim)
        A = math.exp(logs[0])
        tau = math.exp(logs[1])
        if mode == "multiplicative-only":
            sn, sm = 0.0, math.exp(logs[2])
        elif mode == "mixed-free":
            sn, sm = math.exp(logs[2]), math.exp(logs[3])
        else:
            sn, sm = math.exp(logs[2]), 0.0
        sn2 = sn * sn
        if mode == "mixed-known-ratio":
            sm2 = self.spec.known_ratio * sn2 / A
            sm = math.sqrt(sm2)
        else:
            sm2 = sm * sm
        if not self.in_box(A, tau, sn, sm):
            return -math.inf, np.zeros(self.dim)
        B = math.exp(-self.y.dt / tau)
        if not 0.0 < B < 1.0:
            return -math.inf, np.zeros(self.dim)
        grad = np.empty(self.dim)
        lp, dA, dB, dsn2, dsm2 = _joint_core(self.y.values, z[:n], A, B, sn2, sm2, grad[:n])
        if not math.isfinite(lp):
            return -math.inf, np.zeros(self.dim)
        g_logA = dA * A
        g_logtau = dB * B * self.y.dt / tau
        if mode == "mixed-known-ratio":
            # sigma_M^2 = rho sigma_N^2 / A
            g_logA = g_logA - dsm2 * sm2
            g_logsn = dsn2 * 2.0 * sn2 + dsm2 * 2.0 * sm2
        else:
            g_logsn = dsn2 * 2.0 * sn2
        g_logsm = dsm2 * 2.0 * sm2
        # uniform box prior on the positive scale -> Jacobian of the log map
        lp += float(np.sum(logs))
        grad[n] = g_logA + 1.0
        grad[n + 1] = g_logtau + 1.0
        if mode == "multiplicative-only":
            grad[n + 2] = g_logsm + 1.0
        else:
            grad[n + 2] = g_logsn + 1.0
            if mode == "mixed-free":
                grad[n + 3] = g_logsm + 1.0
        return lp, grad


def build_target(y: TimeSeries, spec: ModelSpec) -> Target:
    return Target(y, spec)


def _default_start(target: Target, em_result: em.FitResult | None = None, seed: int = 0):
    """Starting point: parameters from EM, latents drawn from its smoothing posterior.

    Starting the latents exactly at ``y`` makes every residual zero, which
    pulls the noise amplitude towards zero and can trap the chain in the
    narrow region where the path hugs the data.  A draw from the additive
    smoother is a typical point instead.
    """
    y = target.y
    if em_result is None:
        try:
            em_result = em.fit(y)
        except (ValueError, FloatingPointError):
            em_result = None
    if em_result is not None and math.isfinite(em_result.loglik) and em_result.sigma_N > 0:
        A, tau, s = em_result.A, em_result.tau, em_result.sigma_N
    else:
        A0, B0, s = em.initial_guess(y)
        A, tau = A0, -y.dt / math.log(B0)
    p = target.priors
    A = min(A, 0.5 * p.A_max)
    tau = min(max(tau, 2.0 * p.tau_min), 0.5 * p.tau_max)
    s = min(max(s, 1e-3 * math.sqrt(np.var(y.values))), 0.5 * p.sigma_N_max)
    x0 = y.values.copy()
    try:
        moments, _ = em.posterior_moments(y, OUParams(A, tau), s)
        z = np.random.default_rng(seed).standard_normal(len(y))
        x0 = moments.mu + np.sqrt(moments.var) * z
    except (ValueError, FloatingPointError):
        pass
    mode = target.spec.noise_mode
    sn = sm = None
    if mode in ("additive-only", "mixed-known-ratio"):
        sn = s
    elif mode == "multiplicative-only":
        sm = min(s / math.sqrt(A), 0.5 * p.sigma_M_max)
    else:
        sn = s / math.sqrt(2.0)
        sm = min(s / math.sqrt(2.0 * A), 0.5 * p.sigma_M_max)
    return target.pack(x0, A, tau, sn, sm)


@dataclass
class PosteriorFit:
    """Parameter-view chain plus the model it was drawn from."""

    chain: Chain
    spec: ModelSpec
    priors: PriorBox
    param_names: list
    extras: dict = field(default_factory=dict)

    def draws(self, name) -> np.ndarray:
        """Draws on the positive scale; includes derived ``sigma_M`` for known-ratio fits."""
        if name in self.param_names:
            return np.exp(self.chain[f"log_{name}"])
        if name == "sigma_M" and self.spec.noise_mode == "mixed-known-ratio":
            return np.sqrt(self.spec.known_ratio * self.draws("sigma_N") ** 2 / self.draws("A"))
        raise KeyError(name)

    def mean(self, name) -> float:
        return float(np.mean(self.draws(name)))

    def sd(self, name) -> float:
        return float(np.std(self.draws(name), ddof=1))

    def interval(self, name, level=0.95):
        lo = (1.0 - level) / 2.0
        return tuple(float(v) for v in np.quantile(self.draws(name), [lo, 1.0 - lo]))

    def covers(self, name, truth, k=3.0) -> bool:
        return abs(self.mean(name) - truth) <= k * self.sd(name)

    @property
    def all_names(self):
        names = list(self.param_names)
        if self.spec.noise_mode == "mixed-known-ratio":
            names.append("sigma_M")
        return names

    def summary(self) -> dict:
        out = {}
        for nm in self.all_names:
            lo, hi = self.interval(nm)
            out[nm] = {"mean": self.mean(nm), "sd": self.sd(nm), "q2.5": lo, "q97.5": hi}
        return out

    def diagnostics(self) -> dict:
        c = self.chain
        return {
            "ess": {k.removeprefix("log_"): v for k, v in c.ess.items()},
            "rhat": {k.removeprefix("log_"): v for k, v in c.rhat.items()},
            "divergences": c.divergences,
            "warmup_divergences": c.warmup_divergences,
            "flagged": c.flagged,
            "runtime_s": c.runtime_s,
            "step_size": c.step_size,
            "mean_tree_depth": float(np.mean(c.tree_depth)),
            "seed": c.seed,
            "config": c.config,
            "noise_mode": self.spec.noise_mode,
            "known_ratio": self.spec.known_ratio,
            "priors": self.priors.as_dict(),
            **self.extras,
        }


    def to_csv(self, path) -> None:
        """One row per draw, one column per parameter (positive scale)."""
        names = self.all_names
        cols = np.column_stack([self.draws(nm) for nm in names])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names)
            for row in cols:
                w.writerow([repr(float(v)) for v in row])

    def diagnostics_json(self, path=None, include_runtime=True) -> str:
        d = self.diagnostics()
        if not include_runtime:
            d.pop("runtime_s")
        text = json.dumps(d, indent=2, sort_keys=True, default=float)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def sample(target: Target, config: SamplerConfig, start=None) -> PosteriorFit:
    """Run the sampler on ``target``; keeps only the parameter coordinates."""
    z0 = _default_start(target, seed=config.seed) if start is None else np.asarray(start, dtype=float)
    keep = np.arange(target.n, target.dim)
    chain = nuts_sample(target, z0, config, names=target.names, keep=keep)
    return PosteriorFit(chain, target.spec, target.priors, list(target.param_names))


def fit(y: TimeSeries, spec: ModelSpec, config: SamplerConfig) -> PosteriorFit:
    return sample(build_target(y, spec), config)


def fit_known_ratio(y: TimeSeries, rho: float, config: SamplerConfig, priors: PriorBox | None = None) -> PosteriorFit:
    """Mixed thermal + multiplicative fit with the noise ratio held at ``rho``."""
    return fit(y, ModelSpec("mixed-known-ratio", known_ratio=rho, priors=priors), config)


def artificial_noise_variance(sigma_N: float, rho_measured: float, target_rho: float) -> float:
    """White-noise variance that lowers the noise ratio from ``rho_measured`` to ``target_rho``.

    The multiplicative part ``E[x^2] sigma_M^2 = rho_measured sigma_N^2`` is
    unchanged, so ``sigma_N^2 + s^2 = rho_measured sigma_N^2 / target_rho``.
    """
    if not target_rho < rho_measured:
        raise ValueError(f"target ratio {target_rho} must be below the measured ratio {rho_measured}")
    if not target_rho > 0:
        raise ValueError("target ratio must be positive")
    return max(sigma_N**2 * (rho_measured / target_rho - 1.0), 0.0)


def add_artificial_noise(y: TimeSeries, sigma_N: float, rho_measured: float, target_rho: float, seed: int):
    """Returns ``(augmented series, added variance)``."""
    var_add = artificial_noise_variance(sigma_N, rho_measured, target_rho)
    rng = np.random.default_rng(seed)
    values = y.values + math.sqrt(var_add) * rng.standard_normal(len(y))
    return TimeSeries(y.dt, values, y.seed), var_add


def add_artificial_noise_then_fit(
    y: TimeSeries,
    rho_measured: float,
    target_rho: float,
    config: SamplerConfig,
    *,
    sigma_N: float,
    noise_seed: int = 0,
    priors: PriorBox | None = None,
) -> PosteriorFit:
    """Inject white noise to reach ``target_rho``, then run the known-ratio fit.

    ``sigma_N`` is the thermal amplitude of the measurement (known together
    with the ratio, e.g. from a calibration).
    """
    y_aug, var_add = add_artificial_noise(y, sigma_N, rho_measured, target_rho, noise_seed)
    result = fit_known_ratio(y_aug, target_rho, config, priors)
    result.extras.update({"added_variance": var_add, "rho_measured": rho_measured, "target_rho": target_rho})
    return result
