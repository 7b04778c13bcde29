"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed in the "acceptance criteria" section of the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from ou_denoise import cli, em, mcmc
from ou_denoise.model import NoiseParams, OUParams, TimeSeries, add_noise, simulate_latent
from ou_denoise.nuts import SamplerConfig
from ou_denoise.spectra import analytic_g2, loglog_slope, periodogram, second_order_spectrum

from oracles import ChainQuadrature, finite_difference, monte_carlo_g2, random_instance

TRUTH = OUParams(1.0, 1.0)
N = 1500


def observed(seed, dt, noise, n=N):
    x = simulate_latent(TRUTH, n, dt, cli.derive_seed(seed, 0))
    return x, add_noise(x, noise, cli.derive_seed(seed, 1))


def a_covered(fit: mcmc.PosteriorFit) -> bool:
    """Posterior-mean A within three posterior sds of the true amplitude."""
    return abs(fit.mean("A") - TRUTH.A) <= 3 * fit.sd("A")


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_quadrature_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        y, p, sn = random_instance(seed)
        quad = ChainQuadrature(y, p, sn)
        msgs = em.messages(y, p, sn)
        mu, var = em.posterior_marginals(msgs.alphas, msgs.betas)
        exx = em.pairwise_cross_moments(msgs.alphas, msgs.betas, y, p, sn)
        site = [lambda a, b, c: a, lambda a, b, c: b, lambda a, b, c: c]
        errs = [abs(msgs.alphas.loglik - math.log(quad.Z))]
        for i, f in enumerate(site):
            m = quad.expect(f)
            errs.append(abs(mu[i] - m))
            errs.append(abs(var[i] - quad.expect(lambda a, b, c, f=f, m=m: (f(a, b, c) - m) ** 2)))
        errs.append(abs(exx[0] - quad.expect(lambda a, b, c: a * b)))
        errs.append(abs(exx[1] - quad.expect(lambda a, b, c: b * c)))
        worst = max(worst, max(errs))
    runtime = time.perf_counter() - t0
    ok = worst < 1e-6 and runtime < 60
    assert report(1, ok, f"max abs error {worst:.2e} (tol 1e-6) over 10 seeds, {runtime:.1f}s"), worst


# -- 2 and 5: shared reference-protocol runs -------------------------------


@pytest.fixture(scope="module")
def reference_runs():
    em.fit(TimeSeries(0.1, np.random.default_rng(0).normal(size=50)))  # compile before timing
    runs = []
    for seed in range(20):
        _, y = observed(seed, 0.1, NoiseParams(0.2))
        e, t_em = timed(em.fit, y)
        m, t_mc = timed(mcmc.fit, y, mcmc.ModelSpec("additive-only"), SamplerConfig(seed=seed))
        runs.append({"em": e, "mcmc": m, "t_em": t_em, "t_mcmc": t_mc})
    return runs


def test_criterion_2_em_correctness(reference_runs, report):
    within = [abs(r["em"].A - 1) <= 3 * r["em"].dA and abs(r["em"].tau - 1) <= 3 * r["em"].dtau for r in reference_runs]
    inside = []
    for r in reference_runs:
        lo_a, hi_a = r["mcmc"].interval("A")
        lo_t, hi_t = r["mcmc"].interval("tau")
        inside.append(lo_a <= r["em"].A <= hi_a and lo_t <= r["em"].tau <= hi_t)
    runtime = sum(r["t_em"] + r["t_mcmc"] for r in reference_runs)
    f_within, f_inside = np.mean(within), np.mean(inside)
    ok = f_within >= 0.6 and f_inside >= 0.9 and runtime < 600
    detail = (f"truth within 3 EM sd in {f_within:.0%} (need 60%), EM inside MCMC 95% interval in "
              f"{f_inside:.0%} (need 90%), 20 seeds, {runtime:.0f}s")
    assert report(2, ok, detail)


def test_criterion_5_speed(reference_runs, report):
    five = reference_runs[:5]
    ratio = float(np.median([r["t_mcmc"] / r["t_em"] for r in five]))
    chain_ratio = float(np.median([r["mcmc"].chain.runtime_s / r["t_em"] for r in five]))
    ok = ratio >= 10
    detail = (f"median MCMC/EM wall-time ratio {ratio:.0f}x over 5 seeds (need >= 10x; sampler-only {chain_ratio:.0f}x; "
              f"the reported factor 100 is {'met' if ratio >= 100 else 'not met'})")
    assert report(5, ok, detail)


# -- 3 ----------------------------------------------------------------------


def test_criterion_3_monotonicity(report):
    t0 = time.perf_counter()
    worst = math.inf
    for seed in range(100):
        rng = np.random.default_rng(7000 + seed)
        truth = OUParams(rng.uniform(0.3, 3), rng.uniform(0.2, 5))
        n, dt = int(rng.integers(20, 500)), rng.uniform(0.02, 2)
        x = simulate_latent(truth, n, dt, cli.derive_seed(seed, 10))
        y = add_noise(x, NoiseParams(rng.uniform(0.05, 1.5)), cli.derive_seed(seed, 11))
        r = em.fit(y, em.EMConfig(max_iters=300))
        worst = min(worst, float(np.min(np.diff(r.loglik_trace))))
    runtime = time.perf_counter() - t0
    ok = worst >= -1e-8 and runtime < 120
    assert report(3, ok, f"smallest log-likelihood step {worst:.2e} (tol -1e-8), 100 instances, {runtime:.1f}s")


# -- 4 ----------------------------------------------------------------------


def test_criterion_4_gradients(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = TimeSeries(rng.uniform(0.05, 1.0), rng.normal(size=20))
        target = mcmc.build_target(y, mcmc.ModelSpec("mixed-free"))
        x = y.values + 0.3 * rng.normal(size=20)
        # the multiplicative variance is singular at x = 0
        x = np.where(np.abs(x) < 0.1, np.copysign(0.1, x), x)
        z = target.pack(x, *rng.uniform(0.5, 2, size=2), *rng.uniform(0.1, 0.5, size=2))
        _, g = target(z)
        fd = finite_difference(target, z)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    runtime = time.perf_counter() - t0
    ok = worst < 1e-5 and runtime < 60
    assert report(4, ok, f"max relative gradient error {worst:.2e} (tol 1e-5), 20 instances N=20, {runtime:.1f}s")


# -- 6 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_multiplicative_failure(report):
    misses, lines = [], []
    for dt in (0.1, 1.0):
        for seed in range(5):
            _, y = observed(seed, dt, NoiseParams(0.0, 0.2))
            fit = mcmc.fit(y, mcmc.ModelSpec("multiplicative-only"), SamplerConfig(seed=seed))
            misses.append(not a_covered(fit))
            lines.append(f"dt={dt} seed={seed}: A={fit.mean('A'):.3f}+-{fit.sd('A'):.3f}")
    print("\n".join(lines))
    frac = float(np.mean(misses))
    detail = f"posterior-mean A misses truth by > 3 sd in {frac:.0%} of 10 runs (need >= 50%)"
    assert report(6, frac >= 0.5, detail)


# -- 7 ----------------------------------------------------------------------


def known_ratio_fit(seed, dt, rho):
    _, y = observed(seed, dt, NoiseParams.from_ratio(0.2, rho))
    return mcmc.fit_known_ratio(y, rho, SamplerConfig(seed=seed))


@pytest.mark.slow
def test_criterion_7_plateau(report):
    t0 = time.perf_counter()
    cover = [a_covered(known_ratio_fit(seed, 0.05, rho)) for rho in (0.1, 0.25, 0.5) for seed in range(10)]
    frac = float(np.mean(cover))
    detail = f"dt=0.05 tau, rho in {{0.1, 0.25, 0.5}}: A within 3 sd of 1 in {frac:.0%} of 30 runs (need >= 90%), {time.perf_counter() - t0:.0f}s"
    assert report("7a", frac >= 0.9, detail)


@pytest.mark.slow
def test_criterion_7_transition(report):
    t0 = time.perf_counter()
    below = {}
    for rho in (2.0, 4.0):
        below[rho] = float(np.mean([known_ratio_fit(seed, 4.0, rho).mean("A") < 1.0 for seed in range(10)]))
    ok = all(v >= 0.8 for v in below.values())
    detail = (f"dt=4 tau: posterior-mean A below 1 in {below[2.0]:.0%} (rho=2) and {below[4.0]:.0%} (rho=4) of 10 seeds "
              f"(need >= 80% each), {time.perf_counter() - t0:.0f}s")
    assert report("7b", ok, detail)


# -- 8 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_artificial_noise_rescue(report):
    noise = NoiseParams.from_ratio(0.2, 4.0)
    rescued, raw_cover, aug_cover = [], [], []
    for seed in range(10):
        _, y = observed(seed, 0.1, noise)
        cfg = SamplerConfig(seed=seed)
        raw = mcmc.fit_known_ratio(y, 4.0, cfg)
        aug = mcmc.add_artificial_noise_then_fit(y, 4.0, 0.5, cfg, sigma_N=noise.sigma_N, noise_seed=cli.derive_seed(seed, 2))
        raw_cover.append(a_covered(raw))
        aug_cover.append(a_covered(aug))
        rescued.append(not raw_cover[-1] and aug_cover[-1])
    frac = float(np.mean(rescued))
    detail = (f"raw fit fails and augmented fit passes in {frac:.0%} of 10 pairs (need >= 70%); "
              f"raw covers in {np.mean(raw_cover):.0%}, augmented covers in {np.mean(aug_cover):.0%}")
    assert report(8, frac >= 0.7, detail)


# -- 9 ----------------------------------------------------------------------


def test_criterion_9_g2_formula(report):
    t0 = time.perf_counter()
    theta, sigma = 1.0, math.sqrt(2.0)
    times = [0.1, 0.5, 1.0, 2.0]
    mean, se = monte_carlo_g2(times, theta, sigma, 100_000, seed=2024)
    z = max(abs(analytic_g2(s, t, theta, sigma) - mean[i, j]) / se[i, j]
            for i, s in enumerate(times) for j, t in enumerate(times))
    runtime = time.perf_counter() - t0
    ok = z < 3 and runtime < 300
    assert report(9, ok, f"max |analytic - MC| = {z:.2f} MC standard errors on 4x4 grid (need < 3), {runtime:.1f}s")


# -- 10 ---------------------------------------------------------------------


def test_criterion_10_spectra(report):
    t0 = time.perf_counter()
    dt = 0.1

    def averaged(fn, make):
        specs = [fn(make(s)) for s in range(100)]
        return specs[0].freqs, np.mean([sp.power for sp in specs], axis=0)

    def white(s):
        return TimeSeries(dt, np.random.default_rng(cli.derive_seed(s, 20)).normal(size=N))

    def ou(s):
        return simulate_latent(TRUTH, N, dt, cli.derive_seed(s, 21))

    def mult(s):
        return add_noise(ou(s), NoiseParams(0.0, 0.2), cli.derive_seed(s, 22))

    f, p = averaged(periodogram, white)
    top = f[-1]
    white_first = loglog_slope(f, p, top / 10, top)
    f, p = averaged(second_order_spectrum, white)
    white_second = loglog_slope(f, p, top / 10, top)
    # the second-order knee of the latent process sits at 1/(pi tau) ~ 0.32
    f, p = averaged(second_order_spectrum, ou)
    ou_second = loglog_slope(f, p, 1.0, 2.5)
    f, p = averaged(second_order_spectrum, mult)
    mult_second = loglog_slope(f, p, 1.0, 2.5)
    runtime = time.perf_counter() - t0
    ok = abs(white_first) < 0.1 and abs(white_second) < 0.1 and ou_second < -0.5 and mult_second < -0.5 and runtime < 300
    detail = (f"white slopes {white_first:+.3f}/{white_second:+.3f} (|m|<0.1), second-order slopes past knee: "
              f"OU {ou_second:+.2f}, multiplicative {mult_second:+.2f} (< -0.5), {runtime:.0f}s")
    assert report(10, ok, detail)


# -- 11 ---------------------------------------------------------------------


def test_criterion_11_rerun_determinism(tmp_path, report):
    sim = tmp_path / "simulate"
    commands = [
        ["simulate", "--n", "300", "--seed", "3", "--out-dir", str(sim)],
        ["fit", str(sim / "observed.csv"), "--method", "em", "--prefix", "em"],
        ["fit", str(sim / "observed.csv"), "--method", "mcmc", "--noise", "mixed-known-ratio", "--ratio", "0.5",
         "--n-samples", "100", "--n-warmup", "100", "--prefix", "mc"],
        ["sweep", "--variable", "dt_over_tau", "--grid", "0.1,1", "--replicates", "2", "--n", "200"],
        ["sweep", "--variable", "noise_ratio", "--grid", "0.5", "--replicates", "1", "--n", "100",
         "--n-samples", "50", "--n-warmup", "50"],
        ["spectra", "--n", "500", "--max-lag", "10", "--replicates", "2"],
    ]
    checked, mismatched = 0, []
    for k, argv in enumerate(commands):
        first = sim if argv[0] == "simulate" else tmp_path / f"run{k}"
        if argv[0] != "simulate":
            argv = [*argv, "--out-dir", str(first)]
        code = cli.main(argv)
        assert code in (cli.EXIT_OK, cli.EXIT_NONCONVERGED), argv
        manifest = first / f"manifest_{argv[0]}.json"
        again = tmp_path / f"rerun{k}"
        cli.main(["rerun", str(manifest), "--out-dir", str(again)])
        for name in json.loads(manifest.read_text())["outputs"]:
            if name.endswith(".csv") and "timings" not in name:
                checked += 1
                if (first / name).read_bytes() != (again / name).read_bytes():
                    mismatched.append(f"{argv[0]}:{name}")
    ok = checked > 0 and not mismatched
    detail = f"{checked} CSV files across {len(commands)} commands re-run from manifests, mismatches: {mismatched or 'none'}"
    assert report(11, ok, detail)
