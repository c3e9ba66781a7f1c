import numpy as np
import pytest

from latentaug.condition import ConditionSource
from latentaug.diffusion import DenoiserModel, NoiseSchedule
from latentaug.errors import DimensionMismatch, NumericalError
from latentaug.rng import stream
from latentaug.sampler import (
    SamplerConfig,
    cfg_combine,
    generate_set,
    integrate,
    karras_sigmas,
    sample_batch,
    sample_one,
)


def tiny_model(m=4, seed=3):
    src = ConditionSource(mode="class_only", n_classes=7, embed_dim=4, width=6)
    return DenoiserModel(m, src, NoiseSchedule(sigma_data=1.0), hidden=(8,), time_dim=4, seed=seed)


class TestKarrasSigmas:
    def test_endpoints(self):
        sched = NoiseSchedule(0.02, 50.0, 1.0)
        for n in (2, 5, 20):
            sig = karras_sigmas(n, sched)
            assert sig[0] == pytest.approx(50.0, rel=1e-12)
            assert sig[n - 1] == pytest.approx(0.02, rel=1e-12)
            assert sig[-1] == 0.0
            assert np.all(np.diff(sig) < 0)

    def test_single_step(self):
        sched = NoiseSchedule(0.02, 50.0, 1.0)
        assert karras_sigmas(1, sched).tolist() == [50.0, 0.0]

    def test_rho_one_linear(self):
        sched = NoiseSchedule(1.0, 3.0, 1.0)
        assert np.allclose(karras_sigmas(3, sched, rho=1.0), [3.0, 2.0, 1.0, 0.0])


class TestCfgCombine:
    def test_scale_one_is_exactly_cond(self):
        rng = stream(0, "cfg")
        d_cond = rng.standard_normal(8).astype(np.float32)
        d_uncond = rng.standard_normal(8).astype(np.float32)
        out = cfg_combine(d_cond, d_uncond, 1.0)
        assert out is d_cond or np.array_equal(
            out.view(np.uint32), d_cond.view(np.uint32)
        )

    def test_scale_zero_is_exactly_uncond(self):
        rng = stream(1, "cfg")
        d_cond = rng.standard_normal(8).astype(np.float32)
        d_uncond = rng.standard_normal(8).astype(np.float32)
        out = cfg_combine(d_cond, d_uncond, 0.0)
        assert np.array_equal(out.view(np.uint32), d_uncond.view(np.uint32))

    def test_plug_in(self):
        out = cfg_combine(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 2.0)
        assert np.allclose(out, [2.0, -1.0])

    def test_affine_in_scale(self):
        rng = stream(2, "cfg")
        for _ in range(20):
            c = rng.standard_normal(5)
            u = rng.standard_normal(5)
            s = float(rng.uniform(0, 3))
            assert np.allclose(cfg_combine(c, u, s), (1 - s) * u + s * c, atol=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cfg_combine(np.zeros(3), np.zeros(4), 1.0)


class TestIntegrators:
    def test_constant_denoiser_euler_closed_form(self):
        sched = NoiseSchedule(0.01, 80.0, 1.0)
        sigmas = karras_sigmas(20, sched)
        v = np.array([[2.0, -1.0, 0.5]], np.float32)
        x0 = np.array([[5.0, 5.0, 5.0]], np.float32)

        trajectory = []

        def denoiser(x, sigma):
            trajectory.append((x.copy(), sigma))
            return np.broadcast_to(v, x.shape).copy()

        out = integrate(denoiser, x0, sigmas, "euler", [stream(0, "t")])
        # x(sigma) = v + (x0 - v) * sigma / sigma_max at every visited step
        for x_seen, sigma in trajectory:
            expect = v + (x0 - v) * sigma / sigmas[0]
            assert np.allclose(x_seen, expect, rtol=1e-5, atol=1e-6)
        assert np.allclose(out, v, atol=1e-5)

    def test_ancestral_terminal_matches_denoiser(self):
        sched = NoiseSchedule(0.01, 80.0, 1.0)
        sigmas = karras_sigmas(10, sched)
        v = np.array([[1.0, 2.0]], np.float32)
        out = integrate(
            lambda x, s: np.broadcast_to(v, x.shape).copy(),
            np.array([[3.0, 3.0]], np.float32),
            sigmas,
            "euler_ancestral",
            [stream(1, "t")],
        )
        assert np.allclose(out, v, atol=1e-4)

    def test_dpmpp_sde_runs_and_terminates_at_denoiser(self):
        sched = NoiseSchedule(0.01, 80.0, 1.0)
        sigmas = karras_sigmas(10, sched)
        v = np.array([[0.5, -2.0]], np.float32)
        out = integrate(
            lambda x, s: np.broadcast_to(v, x.shape).copy(),
            np.array([[4.0, -4.0]], np.float32),
            sigmas,
            "dpmpp_sde",
            [stream(2, "t")],
        )
        assert np.allclose(out, v, atol=1e-3)

    def test_nonfinite_state_names_step(self):
        sched = NoiseSchedule(0.01, 80.0, 1.0)
        sigmas = karras_sigmas(5, sched)

        def bad_denoiser(x, sigma):
            return np.full_like(x, np.nan)

        with pytest.raises(NumericalError, match="step 0"):
            integrate(bad_denoiser, np.ones((1, 2), np.float32), sigmas, "euler", [stream(3)])

    @staticmethod
    def _euler_contraction(sigmas):
        # With the exact N(0, I) denoiser D = x/(s^2+1), every Euler step is
        # linear, so the whole trajectory is one closed-form multiplier.
        mult = 1.0
        for s, sn in zip(sigmas[:-1], sigmas[1:]):
            mult *= 1 + (sn - s) * s / (s**2 + 1)
        return mult

    def test_gaussian_bayes_denoiser_statistics(self):
        # exact denoiser for N(0, I): D = x / (sigma^2 + 1)
        sched = NoiseSchedule(0.01, 6.0, 1.0)
        sigmas = karras_sigmas(20, sched, rho=3.0)
        n, m = 10_000, 4
        streams = [stream(2026, "gauss-oracle", j) for j in range(n)]
        x0 = np.stack([st.standard_normal(m) for st in streams]).astype(np.float32) * np.float32(
            sigmas[0]
        )
        out = integrate(
            lambda x, s: x / np.float32(s**2 + 1.0), x0, sigmas, "euler", streams
        )
        # the sampler reproduces the closed-form linear trajectory exactly
        mult = self._euler_contraction(sigmas)
        assert np.abs(out - np.float32(mult) * x0).max() < 1e-5
        assert np.all(np.abs(out.mean(axis=0)) < 0.05)
        # pooled variance sits inside the band; the analytic 20-step Euler
        # truth is mult^2 * sigma_max^2 = 0.8537 (first-order discretization
        # under-dispersion), so per-coordinate estimates straddle 0.85
        pooled = float(out.var(axis=0).mean())
        assert 0.85 < pooled < 1.15
        assert pooled == pytest.approx(mult**2 * sched.sigma_max**2, abs=0.02)

    def test_gaussian_statistics_converge_with_steps(self):
        sched = NoiseSchedule(0.01, 6.0, 1.0)
        sigmas = karras_sigmas(60, sched, rho=3.0)
        n, m = 10_000, 4
        streams = [stream(2026, "gauss-oracle", j) for j in range(n)]
        x0 = np.stack([st.standard_normal(m) for st in streams]).astype(np.float32) * np.float32(
            sigmas[0]
        )
        out = integrate(
            lambda x, s: x / np.float32(s**2 + 1.0), x0, sigmas, "euler", streams
        )
        assert np.all(np.abs(out.mean(axis=0)) < 0.05)
        assert np.all((out.var(axis=0) > 0.85) & (out.var(axis=0) < 1.15))


class TestCfgThroughSampler:
    def test_scale_one_bit_identical_to_cond_only(self):
        model = tiny_model()
        cfg = SamplerConfig(steps=6, cfg_scale=1.0, integrator="euler_ancestral")
        a = sample_batch(model, [2, 3], None, cfg, [stream(9, "s", j) for j in range(2)])

        # conditioned-only run: same streams, denoiser called with cond rows only
        from latentaug.diffusion import denoise_batch
        from latentaug.nn import value_of
        from latentaug.sampler import _build_cond_rows

        streams = [stream(9, "s", j) for j in range(2)]
        sigmas = karras_sigmas(cfg.steps, model.schedule, cfg.rho)
        cond_rows = _build_cond_rows(model, [2, 3], None, streams)
        x0 = np.stack([st.standard_normal(model.input_width) for st in streams]).astype(
            np.float32
        ) * np.float32(sigmas[0])
        p = model.params.state_arrays()

        def cond_only(x, sigma):
            return value_of(denoise_batch(model, p, x, np.full(len(x), sigma), cond_rows))

        b = integrate(cond_only, x0, sigmas, cfg.integrator, streams)
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))

    def test_increasing_scale_moves_towards_conditional_mean(self):
        # Bayes denoisers for oracle class mean mu vs null mean 0
        mu = np.array([3.0, 0.0, 0.0, 0.0], np.float32)
        sched = NoiseSchedule(0.01, 80.0, 1.0)
        sigmas = karras_sigmas(20, sched)
        projections = []
        for scale in (0.0, 1.0, 1.2, 2.0):
            n = 400
            streams = [stream(11, "c", j) for j in range(n)]
            x0 = np.stack([st.standard_normal(4) for st in streams]).astype(
                np.float32
            ) * np.float32(sigmas[0])

            def guided(x, s):
                d_c = (x + s**2 * mu) / (s**2 + 1.0)
                d_u = x / (s**2 + 1.0)
                return cfg_combine(d_c, d_u, scale)

            out = integrate(guided, x0, sigmas, "euler", streams)
            projections.append(float(out.mean(axis=0) @ mu / np.linalg.norm(mu)))
        assert all(b > a for a, b in zip(projections, projections[1:]))


class TestGenerateSet:
    def test_counts_seven_classes(self):
        model = tiny_model()
        cfg = SamplerConfig(steps=3, cfg_scale=1.2)
        aug = generate_set(model, range(7), 200, None, cfg, seed=0)
        assert len(aug) == 1400
        for c in range(7):
            assert int((aug.class_ids == c).sum()) == 200

    def test_deterministic_and_stream_isolated(self):
        model = tiny_model()
        cfg = SamplerConfig(steps=4, cfg_scale=1.2)
        a = generate_set(model, [0, 1], 5, None, cfg, seed=123)
        b = generate_set(model, [0, 1], 5, None, cfg, seed=123)
        assert np.array_equal(a.vectors.view(np.uint32), b.vectors.view(np.uint32))
        only0 = generate_set(model, [0], 5, None, cfg, seed=123)
        assert np.array_equal(
            only0.vectors.view(np.uint32), a.vectors[a.class_ids == 0].view(np.uint32)
        )

    def test_n_zero_empty(self):
        model = tiny_model()
        aug = generate_set(model, [0, 1], 0, None, SamplerConfig(steps=2), seed=0)
        assert len(aug) == 0

    def test_sample_one_matches_width(self):
        model = tiny_model()
        v = sample_one(model, 3, None, SamplerConfig(steps=3), stream(5, "one"))
        assert v.shape == (4,)
        assert np.isfinite(v).all()

    def test_provenance_recorded(self):
        model = tiny_model()
        cfg = SamplerConfig(steps=2, cfg_scale=1.2)
        aug = generate_set(model, [1], 2, 0, cfg, seed=9, model_id="abc123")
        assert aug.provenance["model_id"] == "abc123"
        assert aug.provenance["seed"] == 9
        ds = aug.to_dataset(7, 1)
        assert "abc123" in ds.manifest.source_tag
