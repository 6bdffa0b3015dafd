"""Channel-layer tests: fading draws, precoders, denoising factors, and the
aggregation-error identities, checked against hand computation and
Monte-Carlo oracles."""

import numpy as np
import pytest

from airfl.channel import (AggregationErrorRecord, ChannelConfig, ChannelDraw,
                           aircomp_aggregate, bg_bound_denoising_factor,
                           cotaf_denoising_factor, draw_channels, inversion_precoder,
                           mse_theoretical, phase_only_aggregate)
from airfl.errors import (DegenerateSignalError, ParameterError, ShapeError,
                          SingularChannelError)
from airfl.numkit import SeededStream


def awgn(dim, noise_var=0.0, power=1.0, truncation=0.0):
    return ChannelConfig("awgn", noise_var, power, dim, truncation)


class TestChannelDraws:
    def test_error_free_and_awgn_are_unity(self):
        for fading in ("error_free", "awgn"):
            cfg = ChannelConfig(fading, 0.0 if fading == "error_free" else 0.1, 1.0, 4)
            draw = draw_channels(cfg, 7, 0, SeededStream(1, "ch"))
            np.testing.assert_array_equal(draw.coefficients, np.ones(7, dtype=complex))

    def test_rayleigh_unit_second_moment(self):
        cfg = ChannelConfig("rayleigh_block", 0.1, 1.0, 4)
        stream = SeededStream(11, "ch")
        mags = np.concatenate([
            draw_channels(cfg, 100, t, stream).magnitude_sq() for t in range(1000)])
        assert abs(mags.mean() - 1.0) <= 3.0 / np.sqrt(mags.size) < 0.02

    def test_same_seed_and_round_reproduce(self):
        cfg = ChannelConfig("rayleigh_block", 0.1, 1.0, 4)
        a = draw_channels(cfg, 5, 3, SeededStream(9, "ch"))
        b = draw_channels(cfg, 5, 3, SeededStream(9, "ch"))
        np.testing.assert_array_equal(a.coefficients, b.coefficients)

    def test_redrawn_across_rounds(self):
        cfg = ChannelConfig("rayleigh_block", 0.1, 1.0, 4)
        stream = SeededStream(9, "ch")
        a = draw_channels(cfg, 5, 0, stream)
        b = draw_channels(cfg, 5, 1, stream)
        assert not np.array_equal(a.coefficients, b.coefficients)

    def test_snr_conversion(self):
        cfg = ChannelConfig.from_snr_db("awgn", 5.0, dim=10)
        assert cfg.noise_var == pytest.approx(1.0 / 10 ** 0.5, rel=1e-12)
        assert cfg.snr == pytest.approx(10 ** 0.5, rel=1e-12)


class TestInversionPrecoder:
    def test_unit_channel(self):
        assert inversion_precoder(1 + 0j, 1.0) == pytest.approx(1 + 0j)

    def test_complex_arithmetic_oracle(self):
        # |h|^2 = 1, alpha = sqrt(4) * conj(h) = 1.2 - 1.6i
        alpha = inversion_precoder(0.6 + 0.8j, 4.0, 0.0)
        assert alpha == pytest.approx(1.2 - 1.6j, abs=1e-15)

    def test_truncation_below_threshold(self):
        assert inversion_precoder(0.1 + 0j, 1.0, gamma=0.5) == 0j

    def test_deep_fade_guard(self):
        with pytest.raises(SingularChannelError):
            inversion_precoder(1e-9 + 0j, 1.0, gamma=0.0)

    def test_magnitude_alignment_is_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            h = complex(rng.standard_normal(), rng.standard_normal()) / np.sqrt(2)
            beta = float(rng.uniform(0.1, 10.0))
            if abs(h) < 1e-3:
                continue
            alpha = inversion_precoder(h, beta)
            assert abs(h * alpha - np.sqrt(beta)) <= 1e-12 * np.sqrt(beta)


class TestCotafDenoising:
    def test_normalization(self):
        cfg = awgn(dim=4, power=1.0)
        sig = np.full(4, 1.0)  # ||s||^2 = 4 = d * P0
        draw = ChannelDraw(np.ones(1, dtype=complex), 0)
        assert cotaf_denoising_factor([sig], draw, cfg) == pytest.approx(1.0)

    def test_min_rule(self):
        cfg = awgn(dim=4, power=1.0)  # d P0 = 4
        draw = ChannelDraw(np.ones(2, dtype=complex), 0)
        signals = [np.array([1.0, 0, 0, 0]), np.array([2.0, 0, 0, 0])]  # norms^2: 1, 4
        assert cotaf_denoising_factor(signals, draw, cfg) == pytest.approx(1.0)

    def test_power_constraint_met_with_equality(self):
        cfg = awgn(dim=8, power=2.0)
        rng = np.random.default_rng(3)
        draw = ChannelDraw((rng.standard_normal(5) + 1j * rng.standard_normal(5))
                           / np.sqrt(2), 0)
        signals = [rng.standard_normal(8) for _ in range(5)]
        beta = cotaf_denoising_factor(signals, draw, cfg)
        energies = []
        for n, s in enumerate(signals):
            alpha = inversion_precoder(draw.coefficients[n], beta)
            energies.append(abs(alpha) ** 2 * float(s @ s))
        budget = cfg.dim * cfg.power
        assert max(energies) == pytest.approx(budget, rel=1e-12)
        assert all(e <= budget * (1 + 1e-12) for e in energies)

    def test_all_zero_signals_degenerate(self):
        cfg = awgn(dim=3)
        draw = ChannelDraw(np.ones(2, dtype=complex), 0)
        with pytest.raises(DegenerateSignalError):
            cotaf_denoising_factor([np.zeros(3), np.zeros(3)], draw, cfg)


class TestBgBoundDenoising:
    def test_doubling_eta_quarters_beta(self):
        cfg = awgn(dim=6, power=1.0)
        b1 = bg_bound_denoising_factor(0.1, 2.0, 3, 5, cfg)
        b2 = bg_bound_denoising_factor(0.2, 2.0, 3, 5, cfg)
        assert b1 == pytest.approx(4.0 * b2, rel=1e-12)

    def test_substitution_oracle(self):
        cfg = awgn(dim=1, power=1.0)
        beta = bg_bound_denoising_factor(0.5, 1.0, 1, 1, cfg)
        assert beta == pytest.approx(4.0, rel=1e-12)

    def test_theoretical_mse_scales_inverse_snr(self):
        # d sigma_w^2 / beta_bg = Gt^2 E eta^2 / (N^2 SNR): the vector-valued MSE
        # convention absorbs the per-scalar 1/d of the scalar form
        cfg = ChannelConfig("awgn", 0.25, 1.0, 10)
        eta, g_sq, epochs, n = 0.05, 3.0, 4, 6
        beta = bg_bound_denoising_factor(eta, g_sq, epochs, n, cfg)
        expected = g_sq * epochs * eta ** 2 / (n ** 2 * cfg.snr)
        assert mse_theoretical(cfg, beta) == pytest.approx(expected, rel=1e-12)
        half_snr = ChannelConfig("awgn", 0.5, 1.0, 10)
        assert mse_theoretical(half_snr, beta) == pytest.approx(2.0 * expected, rel=1e-12)


class TestMseTheoretical:
    def test_zero_noise(self):
        assert mse_theoretical(awgn(dim=5, noise_var=0.0), 2.0) == 0.0

    def test_substitution(self):
        assert mse_theoretical(ChannelConfig("awgn", 0.5, 1.0, 1), 2.0) == \
            pytest.approx(0.25, rel=1e-15)


def full_inversion_setup(dim=6, n=3, noise_var=0.0, beta=2.0, seed=0):
    cfg = ChannelConfig("rayleigh_block", noise_var, 1.0, dim)
    draw = draw_channels(cfg, n, 0, SeededStream(seed, "ch"))
    rng = np.random.default_rng(seed + 1)
    signals = [rng.standard_normal(dim) for _ in range(n)]
    precoders = [inversion_precoder(h, beta) for h in draw.coefficients]
    return cfg, draw, signals, precoders


class TestAircompAggregate:
    def test_error_free_limit(self):
        cfg, draw, signals, precoders = full_inversion_setup(noise_var=0.0)
        y_hat, record = aircomp_aggregate(signals, precoders, draw, 2.0, cfg,
                                          SeededStream(0, "noise"))
        np.testing.assert_allclose(y_hat, np.sum(signals, axis=0), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(record.epsilon, 0.0, atol=1e-12)
        assert record.sq_norm <= 1e-24
        assert record.participating == (0, 1, 2)

    def test_error_is_scaled_noise_monte_carlo(self):
        dim, beta, noise_var = 12, 2.5, 0.3
        cfg, draw, signals, precoders = full_inversion_setup(dim=dim, noise_var=noise_var,
                                                             beta=beta)
        noise = SeededStream(42, "noise")
        sq = np.array([
            aircomp_aggregate(signals, precoders, draw, beta, cfg, noise.fork(t))[1].sq_norm
            for t in range(10_000)])
        expected = dim * noise_var / beta
        se = sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(sq.mean() - expected) <= 3.0 * se

    def test_per_coordinate_unbiasedness(self):
        dim, beta, noise_var = 8, 1.5, 0.2
        cfg, draw, signals, precoders = full_inversion_setup(dim=dim, noise_var=noise_var,
                                                             beta=beta)
        noise = SeededStream(7, "noise")
        eps = np.stack([
            aircomp_aggregate(signals, precoders, draw, beta, cfg, noise.fork(t))[1].epsilon
            for t in range(10_000)])
        bound = 3.0 * np.sqrt(noise_var / beta) / np.sqrt(eps.shape[0])
        assert np.all(np.abs(eps.mean(axis=0)) <= bound)

    def test_truncated_device_becomes_bias(self):
        dim, beta = 5, 1.0
        cfg = ChannelConfig("rayleigh_block", 0.0, 1.0, dim, truncation=10.0)
        draw = draw_channels(cfg, 3, 0, SeededStream(3, "ch"))
        rng = np.random.default_rng(4)
        signals = [rng.standard_normal(dim) for _ in range(3)]
        # threshold so large that only the strongest device transmits
        mags = np.sqrt(draw.magnitude_sq())
        keep = int(np.argmax(mags))
        gamma = (np.sort(mags)[-1] + np.sort(mags)[-2]) / 2.0
        precoders = [inversion_precoder(h, beta, gamma) for h in draw.coefficients]
        y_hat, record = aircomp_aggregate(signals, precoders, draw, beta, cfg,
                                          SeededStream(0, "noise"))
        expected_eps = -sum(s for n, s in enumerate(signals) if n != keep)
        np.testing.assert_allclose(record.epsilon, expected_eps, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(record.bias, expected_eps, rtol=1e-12, atol=1e-12)
        assert record.participating == (keep,)

    def test_shape_errors(self):
        cfg, draw, signals, precoders = full_inversion_setup()
        with pytest.raises(ShapeError):
            aircomp_aggregate(signals[:-1], precoders, draw, 1.0, cfg,
                              SeededStream(0, "n"))
        with pytest.raises(ParameterError):
            aircomp_aggregate(signals, precoders, draw, 0.0, cfg, SeededStream(0, "n"))


class TestPhaseOnlyAggregate:
    def test_alignment_limit(self):
        dim, beta = 4, 2.0
        cfg = ChannelConfig("awgn", 0.0, 1.0, dim)
        draw = draw_channels(cfg, 3, 0, SeededStream(0, "ch"))  # |h| = 1
        rng = np.random.default_rng(1)
        signals = [rng.standard_normal(dim) for _ in range(3)]
        _, record = phase_only_aggregate(signals, np.full(3, beta), draw, beta, cfg,
                                         SeededStream(0, "noise"))
        np.testing.assert_allclose(record.epsilon, 0.0, atol=1e-12)

    def test_single_device_substitution_oracle(self):
        # gain |h| sqrt(beta_n / beta) = 0.5 leaves epsilon = -0.5 * signal
        dim, beta = 3, 4.0
        cfg = ChannelConfig("rayleigh_block", 0.0, 1.0, dim)
        draw = ChannelDraw(np.array([0.5 + 0j]), 0)
        signal = np.array([2.0, -1.0, 0.5])
        _, record = phase_only_aggregate([signal], np.array([beta]), draw, beta, cfg,
                                         SeededStream(0, "noise"))
        np.testing.assert_allclose(record.epsilon, -0.5 * signal, rtol=1e-12)

    def test_bias_decomposition_identity(self):
        dim, beta = 6, 2.0
        cfg = ChannelConfig("rayleigh_block", 0.0, 1.0, dim)
        draw = draw_channels(cfg, 4, 0, SeededStream(8, "ch"))
        rng = np.random.default_rng(9)
        signals = [rng.standard_normal(dim) for _ in range(4)]
        factors = rng.uniform(0.5, 3.0, size=4)
        _, record = phase_only_aggregate(signals, factors, draw, beta, cfg,
                                         SeededStream(0, "noise"))
        mags = np.sqrt(draw.magnitude_sq())
        expected = sum((mags[n] * np.sqrt(factors[n]) / np.sqrt(beta) - 1.0) * signals[n]
                       for n in range(4))
        np.testing.assert_allclose(record.epsilon, expected, rtol=1e-12, atol=1e-12)

    def test_noise_mean_recovers_deterministic_bias(self):
        dim, beta, noise_var = 5, 2.0, 0.4
        cfg = ChannelConfig("rayleigh_block", noise_var, 1.0, dim)
        draw = draw_channels(cfg, 3, 0, SeededStream(10, "ch"))
        rng = np.random.default_rng(11)
        signals = [rng.standard_normal(dim) for _ in range(3)]
        factors = rng.uniform(0.5, 2.0, size=3)
        noise = SeededStream(12, "noise")
        eps = np.stack([
            phase_only_aggregate(signals, factors, draw, beta, cfg, noise.fork(t))[1].epsilon
            for t in range(10_000)])
        _, record = phase_only_aggregate(signals, factors, draw, beta,
                                         ChannelConfig("rayleigh_block", 0.0, 1.0, dim),
                                         SeededStream(0, "noise"))
        se = eps.std(axis=0, ddof=1) / np.sqrt(eps.shape[0])
        assert np.all(np.abs(eps.mean(axis=0) - record.bias) <= 3.0 * se)
