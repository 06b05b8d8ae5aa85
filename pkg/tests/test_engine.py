"""
Expected outcomes: linear sweep, enumeration oracle, sampler and probe field
Run with: pytest tests/test_engine.py -v
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from conftest import make_market
from paced_gsp.engine import (
    ProbeField,
    expected_outcomes,
    monte_carlo_outcomes,
    outcomes_dp,
    outcomes_oracle,
    sample_impression,
)
from paced_gsp.errors import InvalidInputError, OracleCapExceededError
from paced_gsp.market import Bidder, MarketSnapshot, canonical_sort


@st.composite
def markets_with_pi(draw, max_bidders=12):
    n = draw(st.integers(min_value=1, max_value=max_bidders))
    bids = draw(st.lists(st.floats(min_value=0.5, max_value=100.0), min_size=n, max_size=n))
    reserve = draw(st.floats(min_value=0.0, max_value=50.0))
    market = make_market(bids, reserve=reserve)
    active = len(canonical_sort(market))
    pi = draw(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=active, max_size=active))
    return market, np.asarray(pi, dtype=float)


class TestOutcomesDP:
    """Linear-time eQ/eCPM sweep"""

    def test_01_single_bidder(self):
        """Top rank alone pays the reserve"""
        table = outcomes_dp(make_market([30.0], reserve=10.0), [1.0])
        assert table.eq[0] == pytest.approx(0.33)
        assert table.ecpm[0] == pytest.approx(3.3)

    def test_02_two_bidders_unfiltered(self):
        """Each pays the next bid down"""
        table = outcomes_dp(make_market([30.0, 20.0], reserve=10.0), [1.0, 1.0])
        assert table.eq == pytest.approx([0.33, 0.28])
        assert table.ecpm == pytest.approx([6.6, 2.8])

    def test_03_three_bidders_with_filtering(self):
        """Filtering the middle bidder half the time"""
        table = outcomes_dp(make_market([30.0, 20.0, 15.0], reserve=10.0), [1.0, 0.5, 1.0])
        assert table.eq == pytest.approx([0.33, 0.28, 0.25])
        assert table.ecpm == pytest.approx([5.775, 4.2, 2.5])

    def test_04_empty_market(self):
        """No active bidders gives an empty table"""
        assert len(outcomes_dp(make_market([5.0], reserve=10.0))) == 0

    def test_05_unsorted_input_rejected(self):
        """The array entry point refuses unsorted bids"""
        with pytest.raises(InvalidInputError):
            expected_outcomes([10.0, 20.0], [1.0, 1.0], 5.0)

    def test_06_pi_out_of_range_rejected(self):
        """Filter probabilities must lie in [0, 1]"""
        with pytest.raises(InvalidInputError):
            outcomes_dp(make_market([30.0, 20.0]), [1.2, 0.5])

    def test_07_share_conservation(self):
        """Four or more unfiltered bidders use up the whole page"""
        table = outcomes_dp(make_market([40.0, 30.0, 20.0, 15.0, 12.0], reserve=10.0))
        assert float(np.sum(table.unconditional_share)) == pytest.approx(1.0, abs=1e-12)

    @hsettings(max_examples=200, deadline=None)
    @given(markets_with_pi())
    def test_08_matches_oracle(self, case):
        """Sweep and enumeration agree componentwise within 1e-9"""
        market, pi = case
        dp = outcomes_dp(market, pi)
        oracle = outcomes_oracle(market, pi)
        assert dp.bidder_ids == oracle.bidder_ids
        np.testing.assert_allclose(dp.eq, oracle.eq, rtol=0, atol=1e-9)
        np.testing.assert_allclose(dp.ecpm, oracle.ecpm, rtol=0, atol=1e-9)

    @hsettings(max_examples=100, deadline=None)
    @given(markets_with_pi(), st.sampled_from([0.5, 2.0, 4.0]))
    def test_09_scale_covariance(self, case, tau):
        """Scaling bids and reserve keeps eQ and scales eCPM"""
        market, pi = case
        base = outcomes_dp(market, pi)
        scaled = outcomes_dp(market.scaled(tau), pi)
        np.testing.assert_allclose(scaled.eq, base.eq, rtol=0, atol=1e-12)
        np.testing.assert_allclose(scaled.ecpm, tau * base.ecpm, rtol=1e-9, atol=1e-9)

    @hsettings(max_examples=100, deadline=None)
    @given(markets_with_pi())
    def test_10_bounds(self, case):
        """0 <= eQ <= gamma[0], eCPM >= 0, total share <= 1"""
        market, pi = case
        table = outcomes_dp(market, pi)
        assert np.all(table.eq >= 0.0) and np.all(table.eq <= 0.33 + 1e-12)
        assert np.all(table.ecpm >= -1e-12)
        assert float(np.sum(table.unconditional_share)) <= 1.0 + 1e-12

    def test_11_pi_near_one_stays_accurate(self):
        """Probabilities a hair below one do not break the rolling update"""
        market = make_market([50.0, 40.0, 30.0, 20.0, 15.0], reserve=10.0)
        pi = [1.0 - 1e-10, 1.0 - 1e-13, 0.999999, 1.0 - 1e-11, 0.3]
        np.testing.assert_allclose(outcomes_dp(market, pi).ecpm, outcomes_oracle(market, pi).ecpm, atol=1e-9)

    @pytest.mark.slow
    def test_12_linear_scaling(self):
        """Doubling the bidder count at most ~2.5x the time"""
        rng = np.random.default_rng(7)

        def best_time(n):
            bids = np.sort(rng.uniform(1.0, 100.0, n))[::-1]
            pi = rng.uniform(0.0, 1.0, n)
            times = []
            for _ in range(3):
                start = time.perf_counter()
                expected_outcomes(bids, pi, 0.5)
                times.append(time.perf_counter() - start)
            return min(times)

        small, large = best_time(100_000), best_time(200_000)
        assert large <= 2.5 * small


class TestOutcomesOracle:
    """Exhaustive enumeration"""

    def test_01_three_bidder_example(self):
        """Same defining values as the sweep"""
        table = outcomes_oracle(make_market([30.0, 20.0, 15.0], reserve=10.0), [1.0, 0.5, 1.0])
        assert table.eq == pytest.approx([0.33, 0.28, 0.25])
        assert table.ecpm == pytest.approx([5.775, 4.2, 2.5])

    def test_02_cap_refused(self):
        """More bidders than the cap is refused"""
        market = make_market([float(100 - k) for k in range(25)], reserve=1.0)
        with pytest.raises(OracleCapExceededError, match="cap"):
            outcomes_oracle(market)

    def test_03_empty(self):
        """No active bidders, empty table"""
        assert len(outcomes_oracle(MarketSnapshot(reserve=1.0))) == 0


class TestSampler:
    """Page-view sampling"""

    def test_01_all_filtered_shows_nobody(self):
        """pi = 0 everywhere: nothing shown, nothing spent"""
        draw = sample_impression(make_market([30.0, 20.0]), [0.0, 0.0], rng_seed=1)
        assert not draw.shown.any()
        assert draw.spend == 0.0

    def test_02_deterministic_for_seed(self):
        """Same seed, same draw"""
        market = make_market([30.0, 20.0, 15.0, 12.0, 11.0])
        a = sample_impression(market, None, rng_seed=42)
        b = sample_impression(market, None, rng_seed=42)
        assert np.array_equal(a.shown, b.shown) and np.array_equal(a.price, b.price)

    def test_03_single_bidder_display_rate(self):
        """A lone unfiltered bidder is shown on 3·0.33 of pages"""
        estimate = monte_carlo_outcomes(make_market([30.0]), [1.0], n_draws=200_000, rng_seed=3)
        # share per opportunity is shown/3
        assert estimate.share_mean[0] * 3 == pytest.approx(0.99, abs=5 * 3 * estimate.share_se[0])

    def test_04_matches_expected_outcomes(self):
        """Sampled means within four standard errors of the analytic values"""
        market = make_market([40.0, 30.0, 25.0, 20.0, 15.0, 12.0], reserve=10.0)
        pi = [0.9, 0.5, 1.0, 0.3, 0.7, 1.0]
        table = outcomes_dp(market, pi)
        estimate = monte_carlo_outcomes(market, pi, n_draws=200_000, rng_seed=11)
        assert np.all(np.abs(estimate.spend_mean - table.unconditional_spend) <= 4 * estimate.spend_se + 1e-12)
        assert np.all(np.abs(estimate.share_mean - table.unconditional_share) <= 4 * estimate.share_se + 1e-12)

    @pytest.mark.slow
    def test_05_million_draws_on_random_markets(self):
        """Twenty random markets, 10^6 draws, spend within three standard errors"""
        rng = np.random.default_rng(2024)
        misses = 0
        for _ in range(20):
            n = int(rng.integers(1, 9))
            market = make_market(rng.uniform(5.0, 60.0, n).round(2).tolist(), reserve=5.0)
            pi = rng.uniform(0.0, 1.0, len(canonical_sort(market)))
            table = outcomes_dp(market, pi)
            estimate = monte_carlo_outcomes(market, pi, n_draws=1_000_000, rng_seed=int(rng.integers(1 << 31)))
            misses += int(np.sum(np.abs(estimate.spend_mean - table.unconditional_spend) > 3 * estimate.spend_se + 1e-12))
        # three standard errors miss about 0.3% of the time per bidder
        assert misses <= 2


class TestProbeField:
    """Single-bidder probes against frozen opponents"""

    def test_01_matches_full_sweep(self):
        """Probing equals inserting the bidder and running the sweep"""
        opponents = [
            Bidder(id="x", bid=30.0, budget_per_mille=1.0, priority=1),
            Bidder(id="y", bid=20.0, budget_per_mille=1.0, priority=2),
            Bidder(id="z", bid=12.0, budget_per_mille=1.0, priority=3),
        ]
        pi = {"x": 0.4, "y": 0.8, "z": 1.0}
        field = ProbeField(opponents, pi, reserve=10.0)
        for bid in (11.0, 15.0, 25.0, 35.0):
            market = MarketSnapshot(
                bidders=tuple(opponents) + (Bidder(id="q", bid=bid, budget_per_mille=1.0, priority=4),),
                reserve=10.0,
            )
            order = [b.id for b in canonical_sort(market)]
            table = outcomes_dp(market, [pi.get(i, 1.0) for i in order])
            k = table.index("q")
            assert field.evaluate_one(bid, 4) == pytest.approx((table.eq[k], table.ecpm[k]))

    def test_02_below_reserve_is_zero(self):
        """Probes under the reserve win nothing"""
        field = ProbeField([], {}, reserve=10.0)
        assert field.evaluate_one(5.0, 1) == (0.0, 0.0)

    def test_03_tie_goes_by_priority(self):
        """At an equal bid the lower priority number ranks first"""
        field = ProbeField([Bidder(id="x", bid=20.0, budget_per_mille=1.0, priority=2)], {"x": 1.0}, reserve=10.0)
        assert field.evaluate_one(20.0, 1)[0] == pytest.approx(0.33)
        assert field.evaluate_one(20.0, 3)[0] == pytest.approx(0.28)

    def test_04_missing_pi_rejected(self):
        """Every active opponent needs a probability"""
        with pytest.raises(InvalidInputError):
            ProbeField([Bidder(id="x", bid=20.0, budget_per_mille=1.0, priority=1)], {}, reserve=10.0)
