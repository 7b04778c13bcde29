import json
import math

import numpy as np
import pytest

from ou_denoise import em, mcmc
from ou_denoise.model import NoiseParams, OUParams, TimeSeries, add_noise, joint_logdensity_and_gradient, simulate_latent
from ou_denoise.nuts import SamplerConfig

from oracles import finite_difference


def noisy_series(n=200, dt=0.1, noise=NoiseParams(0.2), seed=0):
    x = simulate_latent(OUParams(1.0, 1.0), n, dt, seed)
    return x, add_noise(x, noise, seed + 10_000)


class TestSpec:
    def test_known_ratio_requires_ratio(self):
        with pytest.raises(ValueError):
            mcmc.ModelSpec("mixed-known-ratio")

    @pytest.mark.parametrize("rho", [-0.1, math.inf, math.nan])
    def test_bad_ratio(self, rho):
        with pytest.raises(ValueError):
            mcmc.ModelSpec("mixed-known-ratio", known_ratio=rho)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            mcmc.ModelSpec("bogus")

    def test_bad_priors(self):
        with pytest.raises(ValueError):
            mcmc.ModelSpec(priors=mcmc.PriorBox(1.0, 2.0, 1.0, 1.0, 1.0))

    def test_default_priors(self):
        _, y = noisy_series()
        p = mcmc.PriorBox.default(y)
        assert p.A_max == pytest.approx(25 * np.var(y.values))
        assert p.tau_min == pytest.approx(0.001)
        assert p.tau_max == pytest.approx(100 * 200 * 0.1)
        assert p.sigma_N_max == pytest.approx(5 * np.std(y.values))

    def test_too_short(self):
        with pytest.raises(ValueError):
            mcmc.build_target(TimeSeries(0.1, np.array([1.0])), mcmc.ModelSpec())


class TestTarget:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("mode", mcmc.NOISE_MODES)
    def test_gradient(self, mode, seed):
        rng = np.random.default_rng(seed)
        y = TimeSeries(0.2, rng.normal(size=20))
        rho = rng.uniform(0.1, 3) if mode == "mixed-known-ratio" else None
        spec = mcmc.ModelSpec(mode, known_ratio=rho)
        t = mcmc.build_target(y, spec)
        x = y.values + 0.2 * rng.normal(size=20)
        # the multiplicative variance vanishes at x = 0; keep clear of that singularity
        x = np.where(np.abs(x) < 0.1, np.copysign(0.1, x), x)
        z = t.pack(x, rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5))
        lp, g = t(z)
        assert math.isfinite(lp)
        fd = finite_difference(t, z)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(g).max()))

    def test_density_is_joint_plus_log_jacobian(self):
        _, y = noisy_series(50)
        t = mcmc.build_target(y, mcmc.ModelSpec("mixed-free"))
        x = y.values * 0.9
        z = t.pack(x, 1.2, 0.8, 0.3, 0.1)
        lp, _ = t(z)
        ref, _ = joint_logdensity_and_gradient(y, x, OUParams(1.2, 0.8), NoiseParams(0.3, 0.1))
        assert lp == pytest.approx(ref + math.log(1.2 * 0.8 * 0.3 * 0.1), abs=1e-10)

    def test_known_ratio_derives_multiplicative_amplitude(self):
        _, y = noisy_series(50)
        t = mcmc.build_target(y, mcmc.ModelSpec("mixed-known-ratio", known_ratio=2.0))
        x = y.values
        lp, _ = t(t.pack(x, 1.5, 0.8, 0.3))
        sm = math.sqrt(2.0 * 0.09 / 1.5)
        ref, _ = joint_logdensity_and_gradient(y, x, OUParams(1.5, 0.8), NoiseParams(0.3, sm))
        assert lp == pytest.approx(ref + math.log(1.5 * 0.8 * 0.3), abs=1e-10)
        assert t.params(t.pack(x, 1.5, 0.8, 0.3))["sigma_M"] == pytest.approx(sm)

    def test_zero_ratio_is_bitwise_additive(self):
        rng = np.random.default_rng(4)
        _, y = noisy_series(100)
        add = mcmc.build_target(y, mcmc.ModelSpec("additive-only"))
        kr = mcmc.build_target(y, mcmc.ModelSpec("mixed-known-ratio", known_ratio=0.0))
        for _ in range(10):
            z = add.pack(y.values + 0.1 * rng.normal(size=100), rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.1, 0.4))
            la, ga = add(z)
            lk, gk = kr(z)
            assert la == lk
            np.testing.assert_array_equal(ga, gk)

    def test_outside_prior_box(self):
        _, y = noisy_series(50)
        t = mcmc.build_target(y, mcmc.ModelSpec())
        lp, g = t(t.pack(y.values, 1e6, 1.0, 0.2))
        assert lp == -math.inf and np.all(g == 0)
        lp, _ = t(np.full(t.dim, 1e6))
        assert lp == -math.inf


class TestSampling:
    def test_additive_smoke(self):
        _, y = noisy_series(1500, seed=3)
        res = mcmc.fit(y, mcmc.ModelSpec("additive-only"), SamplerConfig(seed=1))
        assert res.covers("A", 1.0) and res.covers("tau", 1.0) and res.covers("sigma_N", 0.2)
        em_fit = em.fit(y)
        assert abs(em_fit.A - res.mean("A")) < 2 * res.sd("A")
        assert abs(em_fit.tau - res.mean("tau")) < 2 * res.sd("tau")
        assert res.chain.divergence_rate <= 0.01

    def test_zero_ratio_chain_matches_additive(self):
        _, y = noisy_series(100, seed=5)
        cfg = SamplerConfig(n_samples=100, n_warmup=100, seed=2)
        a = mcmc.fit(y, mcmc.ModelSpec("additive-only"), cfg)
        b = mcmc.fit_known_ratio(y, 0.0, cfg)
        np.testing.assert_array_equal(a.chain.draws, b.chain.draws)
        assert np.all(b.draws("sigma_M") == 0.0)

    def test_deterministic_and_exports(self, tmp_path):
        _, y = noisy_series(100, seed=6)
        cfg = SamplerConfig(n_samples=80, n_warmup=80, seed=3)
        a = mcmc.fit_known_ratio(y, 1.0, cfg)
        b = mcmc.fit_known_ratio(y, 1.0, cfg)
        np.testing.assert_array_equal(a.chain.draws, b.chain.draws)
        a.to_csv(tmp_path / "a.csv")
        b.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header == "A,tau,sigma_N,sigma_M"
        d = json.loads(a.diagnostics_json(tmp_path / "a.json"))
        assert {"ess", "rhat", "divergences", "runtime_s", "seed", "config"} <= set(d)
        assert set(d["rhat"]) == {"A", "tau", "sigma_N"}
        np.testing.assert_allclose(a.draws("sigma_M"), np.sqrt(a.draws("sigma_N") ** 2 / a.draws("A")))

    def test_unknown_draw_name(self):
        _, y = noisy_series(60)
        res = mcmc.fit(y, mcmc.ModelSpec(), SamplerConfig(n_samples=10, n_warmup=10))
        with pytest.raises(KeyError):
            res.draws("sigma_M")


class TestArtificialNoise:
    def test_formula(self):
        # sigma_N^2 + s^2 = rho_m sigma_N^2 / rho_t
        assert mcmc.artificial_noise_variance(0.1, 4.0, 0.5) == pytest.approx(0.01 * 7)

    def test_matches_amplitude_form(self):
        # with E[x^2] = A: s^2 = A sigma_M^2 / rho_t - sigma_N^2
        A, sn, sm = 1.3, 0.15, 0.2
        rho_m = A * sm**2 / sn**2
        assert mcmc.artificial_noise_variance(sn, rho_m, 0.5) == pytest.approx(A * sm**2 / 0.5 - sn**2)

    def test_continuity_at_measured_ratio(self):
        assert mcmc.artificial_noise_variance(0.2, 4.0, 4.0 - 1e-12) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("target", [4.0, 5.0, 0.0, -1.0])
    def test_invalid_target(self, target):
        with pytest.raises(ValueError):
            mcmc.artificial_noise_variance(0.2, 4.0, target)

    def test_empirical_ratio(self):
        n = 100_000
        noise = NoiseParams.from_ratio(0.2, 4.0)
        x = simulate_latent(OUParams(1.0, 1.0), n, 1.0, 1)
        y = add_noise(x, noise, 2)
        y_aug, _ = mcmc.add_artificial_noise(y, noise.sigma_N, 4.0, 0.5, seed=3)
        e2 = (y_aug.values - x.values) ** 2
        x2 = x.values**2
        # E[e^2 | x] = s_N^2 + s_M^2 x^2
        slope, intercept = np.polyfit(x2, e2, 1)
        ratio = np.mean(x2) * slope / intercept
        assert ratio == pytest.approx(0.5, rel=0.10)

    def test_then_fit_records_augmentation(self):
        noise = NoiseParams.from_ratio(0.2, 4.0)
        _, y = noisy_series(100, noise=noise, seed=8)
        res = mcmc.add_artificial_noise_then_fit(
            y, 4.0, 0.5, SamplerConfig(n_samples=30, n_warmup=30), sigma_N=noise.sigma_N, noise_seed=99
        )
        assert res.spec.known_ratio == 0.5
        assert res.extras["added_variance"] == pytest.approx(noise.sigma_N**2 * 7)
