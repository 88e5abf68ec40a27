import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bnb_accounting.errors import ConfigurationError, UnsupportedConfigurationError
from bnb_accounting.losses import (
    AccountingParams,
    Direction,
    OrderSpec,
    PairId,
    PairKind,
    loss_bnb_pq,
    loss_bnb_qp,
    loss_surrogate_upper_pq,
    loss_surrogate_upper_qp,
)
from bnb_accounting.monte_carlo import (
    DeltaEstimate,
    ExactSum,
    McConfig,
    Strategy,
    _make_plan,
    _run_chunks,
    draw_combined_pq,
    draw_importance_points,
    estimate,
    estimate_combined,
    estimate_curve,
    estimate_importance,
    estimate_multi_epoch,
    estimate_order_stats,
    estimate_plain,
    importance_event,
    merge_estimates,
)
from bnb_accounting.numerics import RngStream, gaussian_cdf, kl_ucb

PQ, QP, BOTH = Direction.PQ, Direction.QP, Direction.BOTH
BNB = PairKind.BALLS_BINS
Z99 = 2.5758293035489004


def gaussian_delta(sigma, eps):
    """Hockey stick of N(1, sigma^2) vs N(0, sigma^2)."""
    return float(gaussian_cdf(0.5 / sigma - eps * sigma) - math.exp(eps) * gaussian_cdf(-0.5 / sigma - eps * sigma))


def ci99(est: DeltaEstimate):
    return est.mean_q - Z99 * est.std_error, est.mean_q + Z99 * est.std_error


def overlap(a, b):
    return a[0] <= b[1] and b[0] <= a[1]


class TestExactSum:
    @given(st.lists(st.floats(-1e300, 1e300), max_size=60), st.randoms(use_true_random=False))
    def test_order_independent(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert ExactSum(values).value == ExactSum(shuffled).value == math.fsum(values)

    @given(st.lists(st.floats(-1e10, 1e10), max_size=40), st.integers(0, 40))
    def test_merge(self, values, cut):
        a, b = ExactSum(values[:cut]), ExactSum(values[cut:])
        a.merge(b)
        assert a.value == math.fsum(values)


class TestImportanceEvent:
    def test_qp_threshold(self):
        p = AccountingParams(0.5, 100)
        ev = importance_event(p, 4.0, QP)
        assert ev.threshold == pytest.approx(0.5 + 0.25 * (math.log(100) - 4.0), abs=1e-15)
        assert ev.event_probability == pytest.approx(float(gaussian_cdf(ev.threshold, 0.5)) ** 100, rel=1e-12)

    def test_pq_threshold(self):
        p = AccountingParams(0.5, 100)
        ev = importance_event(p, 4.0, PQ)
        want = 0.5 + 0.25 * (4.0 - math.log1p((math.exp(4.0) - 1) / 100))
        assert ev.threshold == pytest.approx(want, abs=1e-14)
        assert ev.event_probability == pytest.approx(1 - float(gaussian_cdf(want, 0.5)) ** 100, rel=1e-10)

    def test_pq_small_sigma_no_overflow(self):
        ev = importance_event(AccountingParams(0.02, 1000), 3.0, PQ)
        want = 0.5 + 0.0004 * (3.0 - (2500 - math.log(1000)))
        assert ev.threshold == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("sigma,T,eps", [(0.5, 10, 1.0), (1.0, 30, 0.5), (0.4, 200, 2.0)])
    def test_loss_below_eps_outside_event(self, sigma, T, eps):
        # Outside the event the integrand must vanish: check on plain draws.
        p = AccountingParams(sigma, T)
        gen = np.random.default_rng(0)
        x_q = gen.normal(0, sigma, (20_000, T))
        ev = importance_event(p, eps, QP)
        assert np.all(loss_bnb_qp(x_q[~ev.contains(x_q)], p) <= eps + 1e-12)
        x_p = x_q.copy()
        x_p[:, 0] += 1
        ev = importance_event(p, eps, PQ)
        assert np.all(loss_bnb_pq(x_p[~ev.contains(x_p)], p) <= eps + 1e-12)

    def test_draws_satisfy_event(self):
        p = AccountingParams(0.6, 12)
        for direction in (PQ, QP):
            ev = importance_event(p, 1.5, direction)
            x = draw_importance_points(ev, p, np.random.default_rng(1), 100_000)
            assert np.all(ev.contains(x))

    def test_combined_pq_draws_satisfy_event(self):
        p = AccountingParams(0.5, 40)
        ev = importance_event(p, 2.0, PQ)
        spec = OrderSpec((1, 2, 3, 10, 20, 39), 39)
        d = draw_combined_pq(ev, p, spec, spec.restrict(38), np.random.default_rng(2), 10_000)
        realized_max = np.maximum(d.first_shifted, d.rest_max)
        assert np.all(realized_max >= ev.threshold)
        # The conditioned maximum really is the largest coordinate.
        assert np.all(d.first_shifted <= d.top) and np.all(d.rest_max <= d.top)
        assert 0 < d.first.mean() < 0.1

    def test_single_direction_only(self):
        with pytest.raises(ConfigurationError):
            importance_event(AccountingParams(1.0, 2), 1.0, BOTH)


class TestPlain:
    def test_single_step_closed_form(self):
        p = AccountingParams(1.0, 1)
        est = estimate_plain(PairId(BNB, PQ), p, 1.0, McConfig(200_000), 7)
        truth = gaussian_delta(1.0, 1.0)
        assert abs(est.mean_q - truth) <= 3 * est.std_error
        assert est.lower <= est.mean_q <= est.upper_p

    def test_vacuous_at_huge_eps(self):
        p = AccountingParams(1.0, 1)
        cfg = McConfig(5000, beta=1e-3)
        est = estimate_plain(PairId(BNB, PQ), p, 0.5 + 10, cfg, 3)
        assert est.mean_q == 0.0
        assert est.upper_p == pytest.approx(1 - 1e-3 ** (1 / 5000), rel=1e-9)

    def test_deterministic_pair(self):
        p = AccountingParams(0.8, 1)
        est = estimate_plain(PairId(PairKind.DETERMINISTIC, BOTH), p, 0.7, McConfig(100_000), 5)
        assert abs(est.mean_q - gaussian_delta(0.8, 0.7)) <= 4 * est.std_error

    def test_shuffle_single_step(self):
        # One step: N(2, sigma^2) vs N(1, sigma^2) is a unit shift.
        p = AccountingParams(1.0, 1)
        est = estimate_plain(PairId(PairKind.SHUFFLE, PQ), p, 1.0, McConfig(100_000), 6)
        assert abs(est.mean_q - gaussian_delta(1.0, 1.0)) <= 4 * est.std_error

    def test_wrong_strategy(self):
        cfg = McConfig(10, strategy=Strategy.IMPORTANCE)
        with pytest.raises(ConfigurationError):
            estimate_plain(PairId(BNB, PQ), AccountingParams(1.0, 2), 1.0, cfg, 0)

    def test_only_bnb_has_importance(self):
        cfg = McConfig(10, strategy=Strategy.IMPORTANCE)
        with pytest.raises(UnsupportedConfigurationError):
            estimate_importance(PairId(PairKind.POISSON, PQ), AccountingParams(1.0, 2), 1.0, cfg, 0)

    def test_monotone_in_epsilon(self):
        p = AccountingParams(0.7, 8)
        eps = np.linspace(0, 4, 21)
        for direction in (PQ, QP):
            ests = estimate_curve(PairId(BNB, direction), p, eps, McConfig(20_000), 11)
            means = [e.mean_q for e in ests]
            assert all(b <= a for a, b in zip(means, means[1:]))
            assert [e.epsilon for e in ests] == list(eps)

    def test_both_takes_max(self):
        p = AccountingParams(0.7, 8)
        est = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(20_000), 12)
        pq, qp = est.components[PQ], est.components[QP]
        assert est.mean_q == max(pq.mean_q, qp.mean_q)
        assert est.upper_p == max(pq.upper_p, qp.upper_p)
        assert est.direction is BOTH

    def test_direction_streams_match_single_runs(self):
        p = AccountingParams(0.7, 8)
        both = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(5000), 13)
        qp = estimate_plain(PairId(BNB, QP), p, 1.0, McConfig(5000), 13)
        assert both.components[QP] == qp


class TestDeterminismAndMerge:
    def test_repeatable(self):
        p = AccountingParams(0.6, 10)
        a = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(4000), 99)
        b = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(4000), RngStream(99))
        assert a.to_dict() == b.to_dict()

    def test_split_equals_single(self):
        p = AccountingParams(0.6, 10)
        cfg = McConfig(6000, chunk_size=100)
        plan = _make_plan(BNB, QP, p, (1.0,), cfg, RngStream(5).substream(1))
        single = merge_estimates(_run_chunks(plan, range(plan.n_chunks)), cfg.beta)
        parts = [_run_chunks(plan, range(i, plan.n_chunks, 60))[0] for i in range(60)]
        split = merge_estimates(parts[::-1], cfg.beta)
        assert split.mean_q == single.mean_q and split.upper_p == single.upper_p
        assert split.std_error == single.std_error

    def test_worker_pool_matches_sequential(self):
        p = AccountingParams(0.6, 10)
        seq = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(3000, chunk_size=200), 8)
        par = estimate_plain(PairId(BNB, BOTH), p, 1.0, McConfig(3000, chunk_size=200, workers=3), 8)
        assert seq.to_dict() == par.to_dict()

    def test_mismatched_runs_refused(self):
        p = AccountingParams(0.6, 10)
        cfg = McConfig(200, chunk_size=100)
        a = _run_chunks(_make_plan(BNB, QP, p, (1.0,), cfg, RngStream(5)), [0])[0]
        b = _run_chunks(_make_plan(BNB, QP, p, (2.0,), cfg, RngStream(5)), [1])[0]
        with pytest.raises(ConfigurationError):
            merge_estimates([a, b], 1e-3)
        with pytest.raises(ConfigurationError):
            merge_estimates([], 1e-3)

    def test_single_partial_and_halves(self):
        p = AccountingParams(0.6, 10)
        cfg = McConfig(400, chunk_size=200)
        plan = _make_plan(BNB, QP, p, (0.5,), cfg, RngStream(6))
        half = _run_chunks(plan, [0])[0]
        alone = merge_estimates([half], cfg.beta)
        assert alone.mean_q == pytest.approx(half.total.value / half.count, rel=1e-15)
        assert alone.upper_p == kl_ucb(alone.mean_q, 200, cfg.beta)
        # Equal halves: same mean, narrower bound.
        twin = dataclasses.replace(half)
        pooled = merge_estimates([half, twin], cfg.beta)
        assert pooled.mean_q == alone.mean_q
        assert pooled.upper_p < alone.upper_p

    def test_pooled_never_looser_than_worst_worker(self):
        p = AccountingParams(0.6, 10)
        cfg = McConfig(2000, chunk_size=100)
        plan = _make_plan(BNB, QP, p, (0.5,), cfg, RngStream(7))
        parts = [_run_chunks(plan, range(i, 20, 4))[0] for i in range(4)]
        pooled = merge_estimates(parts, cfg.beta)
        assert pooled.upper_p <= max(merge_estimates([q], cfg.beta).upper_p for q in parts)

    def test_to_dict_is_json(self):
        est = estimate_plain(PairId(BNB, BOTH), AccountingParams(1.0, 3), 1.0, McConfig(500), 1)
        d = json.loads(json.dumps(est.to_dict()))
        assert d["direction"] == "both" and d["strategy"] == "plain"
        assert set(d["components"]) == {"pq", "qp"}


class TestImportance:
    def test_matches_plain(self):
        p = AccountingParams(1.0, 5)
        for direction in (PQ, QP):
            pair = PairId(BNB, direction)
            plain = estimate_plain(pair, p, 0.3, McConfig(100_000), 1)
            imp = estimate_importance(pair, p, 0.3, McConfig(100_000, strategy=Strategy.IMPORTANCE), 2)
            assert overlap(ci99(plain), ci99(imp))
            assert imp.std_error < plain.std_error

    def test_sure_event_agrees_with_plain(self):
        # At negative eps the QP event covers the whole space to double precision.
        p = AccountingParams(2.0, 10)
        ev = importance_event(p, -5.0, QP)
        assert ev.event_probability == 1.0
        plain = estimate_plain(PairId(BNB, QP), p, -5.0, McConfig(50_000), 3)
        imp = estimate_importance(PairId(BNB, QP), p, -5.0, McConfig(50_000, strategy=Strategy.IMPORTANCE), 4)
        assert abs(plain.mean_q - imp.mean_q) <= 3 * math.hypot(plain.std_error, imp.std_error)

    def test_scaled_by_event_probability(self):
        p = AccountingParams(0.5, 100)
        est = estimate_importance(PairId(BNB, QP), p, 3.0, McConfig(5000, strategy=Strategy.IMPORTANCE), 5)
        prob = importance_event(p, 3.0, QP).event_probability
        assert est.event_probability == prob
        assert est.upper_p <= prob and est.mean_q <= prob

    def test_event_underflow_certificate(self):
        p = AccountingParams(0.2, 10)
        cfg = McConfig(100, strategy=Strategy.IMPORTANCE)
        # At eps = 80 only the QP event underflows; PQ keeps Pr[E] near 1e-44.
        qp = estimate_importance(PairId(BNB, QP), p, 80.0, cfg, 0)
        assert qp.upper_p == 0.0 and qp.mean_q == 0.0
        assert qp.certificate == "event_underflow"
        both = estimate_importance(PairId(BNB, BOTH), p, 80.0, cfg, 0)
        assert 0 < both.upper_p < 1e-40 and both.certificate == "event_underflow"
        gone = estimate_importance(PairId(BNB, BOTH), p, 500.0, cfg, 0)
        assert gone.upper_p == 0.0 and gone.components[PQ].certificate == "event_underflow"

    def test_multi_epoch_refused(self):
        p = AccountingParams(1.0, 4, epochs=2)
        with pytest.raises(UnsupportedConfigurationError):
            estimate_multi_epoch(PairId(BNB, PQ), p, 1.0, McConfig(10, strategy=Strategy.IMPORTANCE), 0)
        with pytest.raises(UnsupportedConfigurationError):
            estimate(PairId(BNB, PQ), p, 1.0, McConfig(10, strategy=Strategy.COMBINED,
                                                         order_spec=OrderSpec.full(4)), 0)


class TestOrderStats:
    def test_full_spec_matches_plain(self):
        p = AccountingParams(1.0, 50)
        cfg = McConfig(100_000, strategy=Strategy.ORDER_STATS, order_spec=OrderSpec.full(50))
        for direction in (PQ, QP):
            pair = PairId(BNB, direction)
            plain = estimate_plain(pair, p, 2.0, McConfig(100_000), 1)
            os_ = estimate_order_stats(pair, p, 2.0, cfg, 2)
            assert overlap(ci99(plain), ci99(os_))

    def test_coarse_spec_is_conservative(self):
        p = AccountingParams(0.5, 200)
        coarse = OrderSpec((1, 2, 5, 20, 100, 200), 200)
        cfg = McConfig(100_000, strategy=Strategy.ORDER_STATS, order_spec=coarse)
        for direction in (PQ, QP):
            pair = PairId(BNB, direction)
            plain = estimate_plain(pair, p, 1.0, McConfig(100_000), 3)
            est = estimate_order_stats(pair, p, 1.0, cfg, 4)
            assert est.mean_q >= plain.mean_q - 3 * math.hypot(plain.std_error, est.std_error)

    def test_nested_specs_on_common_numbers(self):
        # Adding ranks can only tighten the surrogate, pointwise on the same draw.
        T, sigma, eps = 300, 0.5, 1.0
        p = AccountingParams(sigma, T)
        gen = np.random.default_rng(9)
        x = gen.normal(0, sigma, (2000, T))
        x[:, 0] += 1
        fine = OrderSpec(tuple(range(1, 31)) + tuple(range(40, 300, 10)) + (299,), T - 1)
        coarse = OrderSpec((1, 2, 3, 10, 30, 100, 299), T - 1)
        assert set(coarse.orders) <= set(fine.orders)
        rest = -np.sort(-x[:, 1:], axis=1)
        clip = lambda v: np.maximum(0, -np.expm1(eps - v))
        a = loss_surrogate_upper_pq(x[:, 0], rest[:, fine.array - 1], fine, p).value
        b = loss_surrogate_upper_pq(x[:, 0], rest[:, coarse.array - 1], coarse, p).value
        assert np.all(a <= b + 1e-12) and clip(a).mean() <= clip(b).mean()
        xq = x.copy()
        xq[:, 0] -= 1
        full = -np.sort(-xq, axis=1)
        fine_q, coarse_q = OrderSpec(fine.orders, T), OrderSpec(coarse.orders + (300,), T)
        a = loss_surrogate_upper_qp(full[:, fine_q.array - 1], fine_q, p).value
        b = loss_surrogate_upper_qp(full[:, coarse_q.array - 1], coarse_q, p).value
        assert np.all(a <= b + 1e-12)

    def test_spec_population_checked(self):
        cfg = McConfig(10, strategy=Strategy.ORDER_STATS, order_spec=OrderSpec((1, 2), 7))
        with pytest.raises(ConfigurationError):
            estimate_order_stats(PairId(BNB, QP), AccountingParams(1.0, 20), 1.0, cfg, 0)

    def test_pq_needs_top_rank(self):
        cfg = McConfig(10, strategy=Strategy.ORDER_STATS, order_spec=OrderSpec((2, 5), 19))
        with pytest.raises(ConfigurationError):
            estimate_order_stats(PairId(BNB, PQ), AccountingParams(1.0, 20), 1.0, cfg, 0)

    def test_requires_spec(self):
        with pytest.raises(ConfigurationError):
            McConfig(10, strategy=Strategy.ORDER_STATS)


class TestCombined:
    def test_full_spec_matches_importance(self):
        p = AccountingParams(0.5, 20)
        for direction in (PQ, QP):
            pair = PairId(BNB, direction)
            imp = estimate_importance(pair, p, 3.0, McConfig(100_000, strategy=Strategy.IMPORTANCE), 1)
            comb = estimate_combined(pair, p, 3.0, McConfig(100_000, strategy=Strategy.COMBINED,
                                                             order_spec=OrderSpec.full(20)), 2)
            assert overlap(ci99(imp), ci99(comb))

    def test_small_population(self):
        # T = 2 leaves an empty inner population on the t* != 1 branch.
        p = AccountingParams(0.8, 2)
        cfg = McConfig(100_000, strategy=Strategy.COMBINED, order_spec=OrderSpec.full(2))
        plain = estimate_plain(PairId(BNB, BOTH), p, 0.5, McConfig(100_000), 3)
        comb = estimate_combined(PairId(BNB, BOTH), p, 0.5, cfg, 4)
        for d in (PQ, QP):
            assert overlap(ci99(plain.components[d]), ci99(comb.components[d]))

    def test_resolves_tiny_delta(self):
        p = AccountingParams(0.4, 5000)
        spec = OrderSpec(tuple(range(1, 41)) + tuple(range(50, 5001, 50)), 5000)
        cfg = McConfig(20_000, strategy=Strategy.COMBINED, order_spec=spec)
        est = estimate_combined(PairId(BNB, BOTH), p, 8.0, cfg, 5)
        floor = 1 - 1e-3 ** (1 / 20_000)
        assert 0 < est.upper_p < floor / 10


class TestMultiEpoch:
    def test_one_epoch_bit_identical(self):
        p = AccountingParams(0.7, 6)
        for cfg in (McConfig(3000), McConfig(3000, strategy=Strategy.ORDER_STATS, order_spec=OrderSpec.full(6))):
            single = estimate(PairId(BNB, BOTH), p, 0.8, cfg, 21)
            multi = estimate_multi_epoch(PairId(BNB, BOTH), dataclasses.replace(p, epochs=1), 0.8, cfg, 21)
            assert single.to_dict() == multi.to_dict()

    def test_two_epochs_exceed_one(self):
        p1, p2 = AccountingParams(1.0, 4), AccountingParams(1.0, 4, epochs=2)
        one = estimate_multi_epoch(PairId(BNB, BOTH), p1, 1.0, McConfig(50_000), 1)
        two = estimate_multi_epoch(PairId(BNB, BOTH), p2, 1.0, McConfig(50_000), 2)
        assert two.mean_q >= one.mean_q - 3 * math.hypot(one.std_error, two.std_error)

    def test_order_stats_two_epochs_conservative(self):
        p = AccountingParams(0.8, 30, epochs=2)
        spec = OrderSpec((1, 2, 5, 15, 30), 30)
        plain = estimate_multi_epoch(PairId(BNB, QP), p, 1.0, McConfig(50_000), 3)
        os_ = estimate_multi_epoch(PairId(BNB, QP), p, 1.0,
                                   McConfig(50_000, strategy=Strategy.ORDER_STATS, order_spec=spec), 4)
        assert os_.mean_q >= plain.mean_q - 3 * math.hypot(plain.std_error, os_.std_error)
