import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from bnb_accounting.analytic import (
    LowerBoundCertificate,
    PldDiscretization,
    Rounding,
    bnb_lower_bound,
    bnb_tail_log_probabilities,
    bnb_tail_probabilities,
    convolve_direct,
    delta_deterministic,
    poisson_delta_curve,
    poisson_pld_build,
    poisson_pld_compose_and_delta,
    shuffle_lower_bound,
    shuffle_lower_curve,
)
from bnb_accounting.errors import ConfigurationError, GridOverflowError
from bnb_accounting.losses import AccountingParams, Direction, OrderSpec, PairId, PairKind
from bnb_accounting.monte_carlo import McConfig, Strategy, estimate_combined, estimate_plain
from bnb_accounting.numerics import gaussian_cdf

PQ, QP, BOTH = Direction.PQ, Direction.QP, Direction.BOTH
PESS, OPT = Rounding.PESSIMISTIC, Rounding.OPTIMISTIC

mpmath.mp.dps = 40


def mp_gaussian_delta(sigma, eps):
    s, e = mpmath.mpf(sigma), mpmath.mpf(eps)
    return float(mpmath.ncdf(1 / (2 * s) - e * s) - mpmath.exp(e) * mpmath.ncdf(-1 / (2 * s) - e * s))


class TestDeterministic:
    @pytest.mark.parametrize("sigma", [0.3, 1.0, 4.0])
    def test_eps_zero_is_total_variation(self, sigma):
        want = 2 * float(gaussian_cdf(0.5 / sigma)) - 1
        assert delta_deterministic(AccountingParams(sigma, 1), 0.0) == pytest.approx(want, abs=1e-15)

    @pytest.mark.parametrize("sigma,eps", [(1.0, 1.0), (0.5, 3.0), (2.0, 0.1), (0.3, 8.0)])
    def test_against_mpmath(self, sigma, eps):
        got = delta_deterministic(AccountingParams(sigma, 1), eps)
        assert got == pytest.approx(mp_gaussian_delta(sigma, eps), rel=1e-10, abs=1e-300)

    def test_value(self):
        assert delta_deterministic(AccountingParams(1.0, 1), 1.0) == pytest.approx(0.126936, abs=1e-6)

    def test_huge_eps(self):
        assert delta_deterministic(AccountingParams(1.0, 1), 1e6) == 0.0

    def test_single_epoch_only(self):
        with pytest.raises(ConfigurationError):
            delta_deterministic(AccountingParams(1.0, 1, epochs=2), 1.0)

    @given(st.floats(0.1, 5), st.floats(0, 30), st.floats(0, 5))
    def test_monotone_in_eps(self, sigma, eps, step):
        p = AccountingParams(sigma, 1)
        assert delta_deterministic(p, eps + step) <= delta_deterministic(p, eps) + 1e-16


class TestPldBuild:
    @pytest.mark.parametrize("mode", [PESS, OPT])
    @pytest.mark.parametrize("direction", [PQ, QP])
    def test_masses_sum_to_one(self, mode, direction):
        pld = poisson_pld_build(AccountingParams(0.8, 10), 0.1, 1e-3, mode, direction)
        assert pld.total_mass() == pytest.approx(1.0, abs=1e-12)
        assert np.all(pld.masses >= 0)

    def test_full_sampling_is_gaussian(self):
        # With q = 1 the loss under P is N(1/(2 sigma^2), 1/sigma^2).
        sigma, h = 1.0, 1e-3
        pld = poisson_pld_build(AccountingParams(sigma, 1), 1.0, h, PESS, PQ)
        mu, sd = 0.5 / sigma**2, 1 / sigma
        upper = pld.losses
        lower = upper - h
        cdf = lambda v: np.array([float(mpmath.ncdf((mpmath.mpf(x) - mu) / sd)) for x in v])
        want = cdf(upper[1:-1]) - cdf(lower[1:-1])
        np.testing.assert_allclose(pld.masses[1:-1], want, rtol=0, atol=1e-12)

    def test_rounding_direction(self):
        p = AccountingParams(1.0, 10)
        eps = np.linspace(0, 4, 20)
        pess = poisson_pld_build(p, 0.1, 1e-4, PESS)
        opt = poisson_pld_build(p, 0.1, 1e-4, OPT)
        assert all(pess.delta(e) >= opt.delta(e) for e in eps)

    def test_bad_arguments(self):
        p = AccountingParams(1.0, 10)
        with pytest.raises(ConfigurationError):
            poisson_pld_build(p, 0.1, 0.0)
        with pytest.raises(ConfigurationError):
            poisson_pld_build(p, 0.0, 1e-3)
        with pytest.raises(ConfigurationError):
            poisson_pld_build(p, 0.1, 1e-3, direction=BOTH)

    def test_grid_overflow(self):
        with pytest.raises(GridOverflowError):
            poisson_pld_build(AccountingParams(0.05, 1), 1.0, 1e-9)


class TestComposition:
    def test_single_step_brackets_closed_form(self):
        p = AccountingParams(1.0, 1)
        truth = delta_deterministic(p, 1.0)
        pess = poisson_pld_compose_and_delta(poisson_pld_build(p, 1.0, 1e-4, PESS), 1, 1.0)
        opt = poisson_pld_compose_and_delta(poisson_pld_build(p, 1.0, 1e-4, OPT), 1, 1.0)
        assert opt <= truth <= pess
        assert pess - truth <= 1e-4 and truth - opt <= 1e-4

    @pytest.mark.parametrize("mode", [PESS, OPT])
    def test_two_steps_match_direct(self, mode):
        pld = poisson_pld_build(AccountingParams(1.0, 10), 0.1, 1e-3, mode)
        fft = pld.compose(2)
        direct = convolve_direct(pld, pld)
        start = fft.offset - direct.offset
        window = direct.masses[start:start + fft.masses.size]
        np.testing.assert_allclose(fft.masses, window, rtol=0, atol=1e-12)
        outside = math.fsum(direct.masses) - math.fsum(window)
        assert outside <= 2 * pld.tail_mass + 1e-12
        for e in (0.0, 0.5, 1.0, 2.0):
            assert fft.delta(e) == pytest.approx(direct.delta(e), abs=1e-12)

    def test_composition_matches_gaussian_closed_form(self):
        # q = 1: n steps of the unit-shift Gaussian pair equal one step at sigma / sqrt(n).
        n, sigma = 16, 4.0
        truth = delta_deterministic(AccountingParams(sigma / math.sqrt(n), 1), 1.0)
        pess = poisson_pld_build(AccountingParams(sigma, 1), 1.0, 1e-4, PESS).compose(n).delta(1.0)
        opt = poisson_pld_build(AccountingParams(sigma, 1), 1.0, 1e-4, OPT).compose(n).delta(1.0)
        assert opt <= truth <= pess
        # Rounding moves the composed loss by at most n * h; delta has slope <= 1 in such shifts.
        assert pess - opt <= n * 1e-4

    def test_composed_mass(self):
        pld = poisson_pld_build(AccountingParams(0.5, 100), 0.01, 1e-4, PESS).compose(100)
        assert pld.total_mass() == pytest.approx(1.0, abs=1e-12)
        assert pld.infinity_mass < 1e-13

    def test_monotone_in_eps(self):
        pld = poisson_pld_build(AccountingParams(0.8, 50), 0.02, 1e-4, PESS).compose(50)
        deltas = [pld.delta(e) for e in np.linspace(0, 6, 40)]
        assert all(b <= a for a, b in zip(deltas, deltas[1:]))

    def test_gap_halves_with_grid(self):
        p = AccountingParams(1.0, 16)
        gap = []
        for h in (2e-4, 1e-4):
            pess = poisson_pld_build(p, 1 / 16, h, PESS).compose(16).delta(1.0)
            opt = poisson_pld_build(p, 1 / 16, h, OPT).compose(16).delta(1.0)
            gap.append(pess - opt)
        assert 0 < gap[1] <= gap[0] / 2 * (1 + 1e-3)

    def test_curve_takes_max_over_directions(self):
        p = AccountingParams(0.8, 20)
        eps = [0.5, 1.0, 2.0]
        both = poisson_delta_curve(p, eps, PESS, 1e-3)
        pq = poisson_delta_curve(p, eps, PESS, 1e-3, PQ)
        qp = poisson_delta_curve(p, eps, PESS, 1e-3, QP)
        assert both == [max(a, b) for a, b in zip(pq, qp)]

    def test_curve_epochs_compose(self):
        eps = [1.0]
        two = poisson_delta_curve(AccountingParams(0.8, 10, epochs=2), eps, PESS, 1e-3)
        flat = poisson_delta_curve(AccountingParams(0.8, 20), eps, PESS, 1e-3, sampling_prob=0.1)
        assert two == flat

    def test_bad_steps(self):
        with pytest.raises(ConfigurationError):
            poisson_pld_build(AccountingParams(1.0, 2), 0.5, 1e-3).compose(0)


class TestLowerBound:
    @pytest.mark.parametrize("sigma,eps", [(1.0, 1.0), (0.5, 2.0), (2.0, 0.3)])
    def test_single_step(self, sigma, eps):
        cert = bnb_lower_bound(AccountingParams(sigma, 1), eps)
        assert cert.threshold == pytest.approx(0.5 + eps * sigma**2, abs=1e-5)
        assert cert.value == pytest.approx(delta_deterministic(AccountingParams(sigma, 1), eps), rel=1e-9)

    @pytest.mark.parametrize("sigma,T,eps", [(0.5, 10, 1.0), (1.0, 100, 0.5), (0.3, 1000, 2.0)])
    def test_recomputable(self, sigma, T, eps):
        cert = bnb_lower_bound(AccountingParams(sigma, T), eps)
        s, C = mpmath.mpf(sigma), mpmath.mpf(cert.threshold)
        q_tail = 1 - mpmath.ncdf(C / s) ** T
        p_tail = 1 - mpmath.ncdf((C - 1) / s) * mpmath.ncdf(C / s) ** (T - 1)
        assert cert.q_tail == pytest.approx(float(q_tail), rel=1e-12)
        assert cert.p_tail == pytest.approx(float(p_tail), rel=1e-12)
        assert cert.value == pytest.approx(float(p_tail - mpmath.exp(eps) * q_tail), abs=1e-12)
        assert cert.value <= 1 and not cert.clamped

    def test_local_optimality(self):
        p = AccountingParams(0.5, 50)
        cert = bnb_lower_bound(p, 1.0)
        grid = np.linspace(-5, 5, 20001)
        pt, qt = bnb_tail_probabilities(p, grid)
        assert cert.value >= np.max(pt - math.e * qt) - 1e-12

    @pytest.mark.parametrize("C", [-3.0, 0.4, 6.0, 39.0, 60.0])
    def test_tail_logs_deep(self, C):
        # Tails far below double precision still carry usable logarithms.
        sigma, T = 1.0, 10
        log_p, log_q = bnb_tail_log_probabilities(AccountingParams(sigma, T), C)
        c = mpmath.mpf(C)
        with mpmath.workdps(2000):
            q = 1 - mpmath.ncdf(c) ** T
            p = 1 - mpmath.ncdf(c - 1) * mpmath.ncdf(c) ** (T - 1)
            want_q, want_p = float(mpmath.log(q)), float(mpmath.log(p))
        assert float(log_q) == pytest.approx(want_q, rel=1e-10, abs=1e-13)
        assert float(log_p) == pytest.approx(want_p, rel=1e-10, abs=1e-13)

    def test_clamped(self):
        cert = bnb_lower_bound(AccountingParams(1.0, 10), 500.0)
        assert cert.clamped and cert.value == 0.0 and math.isinf(cert.threshold)
        assert cert.to_dict()["threshold"] is None

    @pytest.mark.parametrize("sigma,T,eps", [(1.0, 10, 0.5), (0.6, 30, 1.5)])
    def test_below_monte_carlo(self, sigma, T, eps):
        p = AccountingParams(sigma, T)
        cert = bnb_lower_bound(p, eps)
        est = estimate_plain(PairId(PairKind.BALLS_BINS, BOTH), p, eps, McConfig(200_000), 1)
        assert cert.value <= est.mean_q + 3 * est.std_error

    def test_single_epoch_only(self):
        with pytest.raises(ConfigurationError):
            bnb_lower_bound(AccountingParams(1.0, 2, epochs=2), 1.0)


class TestShuffle:
    def test_single_step_closed_form(self):
        p = AccountingParams(1.0, 1)
        est = shuffle_lower_bound(p, 1.0, McConfig(200_000), 3)
        truth = delta_deterministic(p, 1.0)
        assert abs(est.mean_q - truth) <= 3 * est.std_error
        assert est.lower <= truth

    def test_lower_only(self):
        est = shuffle_lower_bound(AccountingParams(0.5, 8), 1.0, McConfig(2000), 4)
        assert est.upper_p is None and est.bound_kind == "lower_only"
        assert 0 <= est.lower <= 1
        assert all(c.upper_p is None for c in est.components.values())

    def test_plain_only(self):
        cfg = McConfig(10, strategy=Strategy.ORDER_STATS, order_spec=OrderSpec.full(3))
        with pytest.raises(ConfigurationError):
            shuffle_lower_curve(AccountingParams(1.0, 3), [1.0], cfg, 0)

    def test_exceeds_balls_and_bins_upper(self):
        p = AccountingParams(0.3, 32)
        shuffle = shuffle_lower_bound(p, 3.0, McConfig(50_000, beta=1e-3), 5)
        cfg = McConfig(50_000, beta=1e-3, strategy=Strategy.COMBINED, order_spec=OrderSpec.full(32))
        bnb = estimate_combined(PairId(PairKind.BALLS_BINS, BOTH), p, 3.0, cfg, 6)
        assert shuffle.lower > bnb.upper_p


def test_certificate_fields():
    cert = LowerBoundCertificate(1.0, 0.7, 0.1, 0.3, 0.05)
    assert cert.to_dict() == {"epsilon": 1.0, "threshold": 0.7, "value": 0.1, "p_tail": 0.3,
                              "q_tail": 0.05, "clamped": False}


def test_infinity_atom_counts_fully():
    pld = PldDiscretization(0.1, 0, np.array([0.5]), 0.5, PESS)
    assert pld.delta(100.0) == 0.5
