import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dpfed.privacy import (
    TRUSTED,
    UNTRUSTED,
    DpGuarantee,
    NoiseSchedule,
    NoPrivacyError,
    RdpCurve,
    SensitivityBound,
    account,
    calibrate,
    compose,
    gaussian_renyi,
    gaussian_sample,
    generic_rdp_to_dp,
    privacy_report,
    rdp_to_dp,
    zero_schedule,
)
from dpfed.rng import NOISE, stream


def renyi_divergence_quadrature(delta: float, sigma_sq: float, alpha: float) -> float:
    """Independent oracle: numerically integrate the 1-D Renyi integrand
    between N(0, sigma_sq) and N(delta, sigma_sq)."""
    sigma = math.sqrt(sigma_sq)

    def integrand(x):
        log_p = -0.5 * (x / sigma) ** 2
        log_q = -0.5 * ((x - delta) / sigma) ** 2
        return math.exp(alpha * log_p + (1 - alpha) * log_q) / (sigma * math.sqrt(2 * math.pi))

    val, _ = integrate.quad(integrand, -np.inf, np.inf, limit=200)
    return math.log(val) / (alpha - 1)


class TestGaussianRenyi:
    def test_zero_shift(self):
        assert gaussian_renyi(0.0, 3.7, 5.0) == 0.0

    def test_direct_formula_values(self):
        # alpha * Delta^2 / (2 sigma^2), evaluated by hand.
        assert gaussian_renyi(1.0, 1.0, 2.0) == pytest.approx(1.0, rel=1e-15)
        assert gaussian_renyi(2.0, 2.0, 3.0) == pytest.approx(3.0, rel=1e-15)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            alpha = rng.uniform(1.1, 10.0)
            delta = rng.uniform(0.0, 3.0)
            sigma_sq = rng.uniform(0.1, 4.0)
            oracle = renyi_divergence_quadrature(delta, sigma_sq, alpha)
            closed = gaussian_renyi(delta, sigma_sq, alpha)
            assert closed == pytest.approx(oracle, rel=1e-6, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            gaussian_renyi(1.0, 0.0, 2.0)
        with pytest.raises(ValueError):
            gaussian_renyi(-1.0, 1.0, 2.0)
        with pytest.raises(ValueError):
            gaussian_renyi(1.0, 1.0, 1.0)


class TestCompose:
    def test_empty(self):
        assert compose([]) == 0.0

    def test_additivity(self):
        assert compose([1.0, 2.0, 3.0]) == 6.0

    def test_t_copies_matches_closed_form(self):
        alpha, S, sigma_sq, T = 3.0, 2.0, 8.0, 16
        per_round = 2 * alpha * S**2 / sigma_sq
        assert compose([per_round] * T) == pytest.approx(2 * alpha * S**2 * T / sigma_sq,
                                                         rel=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            compose([1.0, -0.5])


class TestAccount:
    def test_untrusted_example(self):
        sched = NoiseSchedule(UNTRUSTED, np.full((1, 4), 16.0))
        rho = account(sched, S=1.0, M=1)
        assert rho.shape == (1,)
        assert rho[0] == pytest.approx(1.0, rel=1e-15)

    def test_trusted_example(self):
        sched = NoiseSchedule(TRUSTED, np.full(4, 4.0))
        assert account(sched, S=1.0, M=2) == pytest.approx(1.0, rel=1e-15)

    def test_doubling_variance_scales_rho(self):
        s1 = NoiseSchedule(TRUSTED, np.full(7, 5.0))
        s2 = NoiseSchedule(TRUSTED, np.full(7, 10.0))
        r1 = account(s1, S=3.0, M=4)
        r2 = account(s2, S=3.0, M=4)
        assert r2 == pytest.approx(r1 / math.sqrt(2), rel=1e-12)

    def test_monotone_decreasing_in_each_variance(self):
        var = np.full(5, 2.0)
        base = account(NoiseSchedule(TRUSTED, var), S=1.0, M=1)
        for i in range(5):
            bumped = var.copy()
            bumped[i] *= 1.5
            assert account(NoiseSchedule(TRUSTED, bumped), S=1.0, M=1) < base

    def test_zero_schedule_refused(self):
        with pytest.raises(NoPrivacyError):
            account(zero_schedule(4, 2, UNTRUSTED), S=1.0, M=2)

    def test_machine_count_mismatch(self):
        sched = NoiseSchedule(UNTRUSTED, np.full((2, 4), 1.0))
        with pytest.raises(ValueError):
            account(sched, S=1.0, M=3)


class TestCalibrate:
    def test_untrusted_closure_example(self):
        sched = calibrate(1.0, S=1.0, T=4, M=1, mode=UNTRUSTED)
        assert np.all(sched.variances == 16.0)
        assert account(sched, 1.0, 1)[0] == pytest.approx(1.0, rel=1e-15)

    def test_trusted_closure_example(self):
        sched = calibrate(1.0, S=1.0, T=4, M=2, mode=TRUSTED)
        assert np.all(sched.variances == 4.0)
        assert account(sched, 1.0, 2) == pytest.approx(1.0, rel=1e-15)

    def test_mnist_scale_constants(self):
        sched = calibrate(4.0, S=118.1, T=600, M=100, mode=UNTRUSTED)
        expected = 4.0 * 118.1**2 * 600 / 16.0  # = 2_092_141.5
        assert sched.variances.shape == (100, 600)
        assert float(sched.variances[0, 0]) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(2.0921e6, rel=1e-4)

    def test_closure_random(self):
        rng = np.random.default_rng(22)
        for _ in range(25):
            rho = rng.uniform(0.1, 32)
            S = rng.uniform(0.1, 200)
            T = int(rng.integers(1, 10_000))
            M = int(rng.integers(1, 129))
            for mode in (UNTRUSTED, TRUSTED):
                out = account(calibrate(rho, S, T, M, mode), S, M)
                out = float(np.max(out)) if mode == UNTRUSTED else out
                assert out == pytest.approx(rho, rel=1e-12)

    def test_trusted_untrusted_variance_ratio_is_m_squared(self):
        rho, S, T, M = 2.5, 7.0, 64, 12
        vu = calibrate(rho, S, T, M, UNTRUSTED).variances[0, 0]
        vt = calibrate(rho, S, T, M, TRUSTED).variances[0]
        assert vu / vt == pytest.approx(M**2, rel=1e-12)

    def test_rejects_nonpositive_rho(self):
        with pytest.raises(ValueError):
            calibrate(0.0, 1.0, 4, 1, UNTRUSTED)


class TestRdpToDp:
    def test_zero_rho(self):
        assert rdp_to_dp(0.0, 0.1).epsilon == 0.0

    def test_exact_small_example(self):
        g = rdp_to_dp(1.0, math.exp(-2.0))
        assert g.epsilon == pytest.approx(2.5, rel=1e-12)

    def test_paper_scale_example(self):
        g = rdp_to_dp(4.0, 1e-5)
        expected = 8.0 + 4.0 * math.sqrt(2.0 * math.log(1e5))
        assert g.epsilon == pytest.approx(expected, rel=1e-12)
        assert g.epsilon == pytest.approx(27.19, abs=5e-3)

    def test_optimal_over_orders(self):
        # The closed form must match the best grid value of
        # eps(alpha) + log(1/delta)/(alpha - 1) and never beat it.
        rho, delta = 1.7, 1e-6
        alphas = np.linspace(1.0001, 400, 400_000)
        grid = generic_rdp_to_dp(alphas, alphas * rho**2 / 2, delta)
        closed = rdp_to_dp(rho, delta)
        assert closed.epsilon <= grid.epsilon + 1e-12
        assert grid.epsilon == pytest.approx(closed.epsilon, rel=1e-6)

    def test_monotone_in_rho_and_delta(self):
        assert rdp_to_dp(2.0, 1e-5).epsilon > rdp_to_dp(1.0, 1e-5).epsilon
        assert rdp_to_dp(1.0, 1e-6).epsilon > rdp_to_dp(1.0, 1e-4).epsilon

    def test_delta_domain(self):
        for delta in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                rdp_to_dp(1.0, delta)


class TestGenericRdpToDp:
    def test_single_point(self):
        g = generic_rdp_to_dp([2.0], [1.0], math.exp(-1.0))
        assert g.epsilon == pytest.approx(2.0, rel=1e-12)

    def test_linear_curve_close_to_closed_form(self):
        rho, delta = 0.8, 1e-5
        alphas = np.linspace(1.001, 200, 100_000)
        g = generic_rdp_to_dp(alphas, alphas * rho**2 / 2, delta)
        assert g.epsilon == pytest.approx(rdp_to_dp(rho, delta).epsilon, rel=1e-2)

    def test_delta_near_one_recovers_min_epsilon(self):
        alphas = np.array([2.0, 3.0, 4.0])
        eps = np.array([5.0, 1.5, 9.0])
        g = generic_rdp_to_dp(alphas, eps, 1 - 1e-12)
        assert g.epsilon == pytest.approx(1.5, abs=1e-9)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            generic_rdp_to_dp([], [], 1e-5)


class TestGaussianSample:
    def test_zero_variance_yields_zeros_and_preserves_stream(self):
        rng = stream(9, NOISE, 0)
        zero = gaussian_sample(4, 0.0, rng)
        assert np.array_equal(zero, np.zeros(4))
        after = gaussian_sample(4, 1.0, rng)
        fresh = gaussian_sample(4, 1.0, stream(9, NOISE, 0))
        assert np.array_equal(after, fresh)

    def test_monte_carlo_variance_1d(self):
        rng = np.random.default_rng(23)
        draws = gaussian_sample(1_000_000, 2.5, rng)  # dim used as batch of 1-D draws
        assert float(np.var(draws)) == pytest.approx(2.5, rel=1e-2)

    def test_expected_squared_norm(self):
        rng = np.random.default_rng(24)
        d, var, n = 16, 0.7, 20_000
        sq = [float(np.sum(gaussian_sample(d, var, rng) ** 2)) for _ in range(n)]
        se = np.std(sq, ddof=1) / math.sqrt(n)
        assert abs(np.mean(sq) - d * var) <= 4 * se

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            gaussian_sample(3, -1.0, np.random.default_rng(0))


class TestTypes:
    def test_rdp_curve(self):
        curve = RdpCurve(rho=2.0)
        assert curve.epsilon(3.0) == 6.0
        with pytest.raises(ValueError):
            curve.epsilon(1.0)
        with pytest.raises(ValueError):
            RdpCurve(rho=-1.0)

    def test_dp_guarantee_domain(self):
        with pytest.raises(ValueError):
            DpGuarantee(epsilon=1.0, delta=0.0)
        with pytest.raises(ValueError):
            DpGuarantee(epsilon=-1.0, delta=0.5)

    def test_sensitivity_bound(self):
        assert SensitivityBound.for_mode(3.0, 5, UNTRUSTED).per_round_delta == 6.0
        assert SensitivityBound.for_mode(3.0, 5, TRUSTED).per_round_delta == 6.0 / 5
        mm = [SensitivityBound.for_mode(2.0, m, TRUSTED).per_round_delta for m in (1, 2, 4)]
        assert mm == [4.0, 2.0, 1.0]

    def test_noise_schedule_validation(self):
        with pytest.raises(ValueError):
            NoiseSchedule(UNTRUSTED, np.ones(4))            # needs (M, T)
        with pytest.raises(ValueError):
            NoiseSchedule(TRUSTED, np.ones((2, 4)))          # needs (T,)
        with pytest.raises(ValueError):
            NoiseSchedule(TRUSTED, np.array([1.0, 0.0]))     # mixed zero/positive
        assert zero_schedule(3, 2, UNTRUSTED).is_zero

    def test_machine_variances_trusted_rejected(self):
        with pytest.raises(ValueError):
            zero_schedule(3, 1, TRUSTED).machine_variances(0)


def test_privacy_report_schema():
    report = privacy_report(UNTRUSTED, 2.0, [1e-5, 1e-6])
    assert set(report) == {"mode", "rho", "rdp_curve", "epsilon_at_delta"}
    assert report["rdp_curve"] == "alpha*rho^2/2"
    assert [row["delta"] for row in report["epsilon_at_delta"]] == [1e-5, 1e-6]
    assert report["epsilon_at_delta"][0]["epsilon"] == pytest.approx(
        rdp_to_dp(2.0, 1e-5).epsilon)


@settings(max_examples=200, deadline=None)
@given(
    rho=st.floats(0.1, 32),
    S=st.floats(0.1, 200),
    T=st.integers(1, 10_000),
    M=st.integers(1, 128),
    trusted=st.booleans(),
)
def test_calibration_closure_property(rho, S, T, M, trusted):
    mode = TRUSTED if trusted else UNTRUSTED
    out = account(calibrate(rho, S, T, M, mode), S, M)
    out = float(np.max(out)) if mode == UNTRUSTED else out
    assert out == pytest.approx(rho, rel=1e-12)
