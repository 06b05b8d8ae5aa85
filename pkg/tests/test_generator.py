"""
Synthetic markets: calibration, policies and reproducibility
Run with: pytest tests/test_generator.py -v
"""

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import make_trace, static_history
from paced_gsp.engine import ProbeField
from paced_gsp.errors import InvalidInputError
from paced_gsp.generator import (
    FollowerConfig,
    Moments,
    Policy,
    PolicyMix,
    SyntheticMarketSpec,
    best_response_bid,
    generate_market,
    generate_region,
    sample_population,
    sample_region,
    summarize_population,
)
from paced_gsp.io import round_sig
from paced_gsp.market import Bidder, MarketSnapshot
from paced_gsp.pacing import solve_pacing_with_retry
from paced_gsp.recommender import recommend_bid
from paced_gsp.regret import adherence_curve, build_rationalizable_set


def small_spec(**overrides) -> SyntheticMarketSpec:
    params = {
        "seed": 7,
        "n_days": 20,
        "agents": {"mean": 4.0, "std": 1.0},
        "active_duration": {"mean": 15.0, "std": 3.0},
    }
    params.update(overrides)
    return SyntheticMarketSpec.model_validate(params)


@pytest.fixture
def opponent_field() -> ProbeField:
    """One unfiltered opponent at 10 over a reserve of 5."""
    return ProbeField([Bidder(id="o", bid=10.0, budget_per_mille=1e6, priority=1)], {"o": 1.0}, reserve=5.0)


class TestSpec:
    """Configuration"""

    def test_01_packaged_calibration(self):
        """The bundled YAML loads and keyword overrides win"""
        spec = SyntheticMarketSpec.from_yaml(seed=3, n_regions=2)
        assert spec.seed == 3 and spec.n_regions == 2
        assert spec.bids.mean == pytest.approx(18.79)
        assert sum(spec.weekday_multipliers) == pytest.approx(7.0)

    def test_02_yaml_file(self, tmp_path):
        """A user file replaces the defaults it names"""
        path = tmp_path / "market.yaml"
        path.write_text("n_days: 45\nreserve: {mean: 5.0, std: 1.0}\n")
        spec = SyntheticMarketSpec.from_yaml(path, seed=1)
        assert spec.n_days == 45
        assert spec.reserve.mean == 5.0

    def test_03_missing_file(self, tmp_path):
        """An absent YAML file is invalid input"""
        with pytest.raises(InvalidInputError):
            SyntheticMarketSpec.from_yaml(tmp_path / "nope.yaml")

    def test_04_seed_required(self):
        """Stochastic generation refuses to run unseeded"""
        with pytest.raises(InvalidInputError):
            generate_market(small_spec(seed=None))

    def test_05_policy_mix_needs_weight(self):
        """All-zero mixes are rejected"""
        with pytest.raises(ValidationError):
            PolicyMix(fixed=0.0, random_walk=0.0, best_response=0.0, follower=0.0)

    def test_06_follower_ramp(self):
        """Adoption grows with tenure and caps at one"""
        follower = FollowerConfig(initial_adoption=0.2, adoption_ramp=0.25)
        assert follower.adoption(0) == pytest.approx(0.2)
        assert follower.adoption(2) == pytest.approx(0.7)
        assert follower.adoption(10) == 1.0

    def test_07_lognormal_moments(self):
        """Draws match the configured mean and standard deviation"""
        draws = Moments(mean=10.0, std=4.0).lognormal(np.random.default_rng(0), 200_000)
        assert draws.mean() == pytest.approx(10.0, rel=0.02)
        assert draws.std() == pytest.approx(4.0, rel=0.05)


class TestPopulation:
    """Region and agent draws"""

    def test_01_regions_reproducible_on_their_own(self):
        """A region's draw depends only on the seed and its index"""
        alone = sample_region(small_spec(n_regions=1), 0)
        among_many = sample_population(small_spec(n_regions=3))[0]
        assert alone == among_many

    def test_02_seed_changes_draws(self):
        """Different seeds give different regions"""
        assert sample_region(small_spec(seed=1), 0) != sample_region(small_spec(seed=2), 0)

    def test_03_agent_windows_inside_horizon(self):
        """Every agent is active inside the simulated days"""
        spec = small_spec(n_regions=5)
        for draw in sample_population(spec):
            for agent in draw.agents:
                assert agent.start_date >= spec.start_date
                assert (agent.end_date - spec.start_date).days < spec.n_days
                assert (agent.value is not None) == (agent.policy is Policy.BEST_RESPONSE)

    def test_04_calibration_matches_targets(self):
        """Means over a thousand regions land within 15% of the configured ones"""
        spec = SyntheticMarketSpec.from_yaml(seed=11, n_regions=1000)
        summary = summarize_population(sample_population(spec))
        errors = summary.relative_errors(spec)
        assert set(errors) == {
            "agents", "bids", "daily_budget", "active_duration", "reserve", "bid_change_rate", "daily_volume",
        }
        assert max(errors.values()) < 0.15

    def test_05_empty_summary(self):
        """Nothing to summarize"""
        with pytest.raises(InvalidInputError):
            summarize_population([])


class TestBestResponse:
    """Planted-value bidding"""

    @pytest.mark.parametrize("value,expected", [(25.0, 7.5), (50.0, 11.0), (2.0, 4.5)])
    def test_01_step_midpoints(self, opponent_field, value, expected):
        """Middle of the best step, or under the reserve when nothing pays"""
        assert best_response_bid(opponent_field, value, priority=2) == pytest.approx(expected)

    def test_02_planted_value_is_rationalizable(self):
        """A best responder's own value carries no regret"""
        bids = [7.5] * 6
        rset = build_rationalizable_set(make_trace(bids), static_history(bids))
        assert rset.regret_at(25.0) <= 1e-9


class TestGenerateRegion:
    """Day-by-day synthetic play"""

    def test_01_deterministic(self):
        """Same spec, same traces and bidders"""
        first = generate_region(small_spec(), 0)
        second = generate_region(small_spec(), 0)
        assert first.traces == second.traces
        assert first.bidders == second.bidders

    def test_02_bidders_rebuild_the_traces(self):
        """The bidder intervals hold each agent's bid on every traced day"""
        dataset = generate_region(small_spec(), 0)
        for trace in dataset.traces:
            for record in trace.records:
                standing = [
                    row.bid
                    for row in dataset.bidders
                    if row.agent_id == trace.agent_id and row.start_date <= record.date <= row.end_date
                ]
                assert standing == [record.bid]

    def test_03_recommendations_recorded(self):
        """Every traced day carries the day's recommended bid"""
        dataset = generate_region(small_spec(), 0)
        assert dataset.traces
        assert all(trace.has_recommendations for trace in dataset.traces)

    def test_04_write(self, tmp_path):
        """A region writes its four files"""
        generate_region(small_spec(), 0).write(tmp_path)
        for name in ("market.json", "bidders.csv", "traces.csv", "profiles.csv"):
            assert (tmp_path / name).is_file()

    def test_05_fixed_agents_never_move(self):
        """A fixed-only market keeps every initial bid"""
        mix = {"fixed": 1.0, "random_walk": 0.0, "best_response": 0.0, "follower": 0.0}
        dataset = generate_region(small_spec(policy_mix=mix), 0)
        assert all(trace.bid_change_count == 0 for trace in dataset.traces)

    def test_06_recommendations_use_the_carried_budget(self):
        """Each day's recommendation is made for the budget the replay paces with"""
        mix = {"fixed": 1.0, "random_walk": 0.0, "best_response": 0.0, "follower": 0.0}
        dataset = generate_region(small_spec(policy_mix=mix), 0)
        recorded = {(t.agent_id, r.date): r.recommended_bid for t in dataset.traces for r in t.records}
        nominal = {a.agent_id: a.daily_budget_per_mille for a in dataset.draw.agents}

        moved = False
        for day in dataset.run.days:
            budgets = day.budgets_per_mille
            market = MarketSnapshot(
                bidders=tuple(
                    Bidder(id=b.agent_id, bid=b.bid, budget_per_mille=budgets[b.agent_id], priority=b.priority)
                    for b in day.bids
                ),
                reserve=dataset.config.reserve,
                weights=dataset.config.weights,
            )
            pi = solve_pacing_with_retry(market).pi_by_id()
            for b in day.bids:
                expected = recommend_bid(
                    market, budgets[b.agent_id], bidder_id=b.agent_id, coupling="frozen", opponent_pi=pi
                ).bid
                assert recorded[(b.agent_id, day.date)] == round_sig(expected)
                moved |= budgets[b.agent_id] != pytest.approx(nominal[b.agent_id])
        assert moved


@pytest.mark.slow
class TestFollowerAdoption:
    """Cohort adherence under a growing adoption rate"""

    def test_01_adherence_rises_with_tenure(self):
        """Followers match the recommendation more often in later months"""
        spec = small_spec(
            seed=42,
            n_regions=12,
            n_days=120,
            agents={"mean": 6.0, "std": 1.0},
            active_duration={"mean": 115.0, "std": 3.0},
            bid_change_rate={"mean": 3.0, "std": 0.5},
            policy_mix={"fixed": 0.0, "random_walk": 0.0, "best_response": 0.0, "follower": 1.0},
        )
        traces = [trace for dataset in generate_market(spec) for trace in dataset.traces]
        curve = adherence_curve(traces)
        assert len(curve.overall) >= 4
        assert curve.overall[0] < 0.5
        assert curve.overall[3] > curve.overall[0] + 0.1
