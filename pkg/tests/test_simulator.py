"""
Daily replay: allowances, carryover, monthly reset and volume modulation
Run with: pytest tests/test_simulator.py -v
"""

import datetime as dt

import pytest
from pydantic import ValidationError

from paced_gsp.errors import InvalidInputError
from paced_gsp.simulator import (
    AgentLedger,
    BidInterval,
    BidSchedule,
    RegionConfig,
    ScheduledBid,
    daily_allowance,
    day_budgets,
    modulate_volume,
    run_day,
    simulate_region,
)

JAN_1 = dt.date(2024, 1, 1)  # a Monday


def region(**overrides) -> RegionConfig:
    params = {"reserve": 10.0, "base_daily_volume": 1000.0}
    params.update(overrides)
    return RegionConfig(**params)


def interval(agent_id, bid, monthly, start, end, priority=1) -> BidInterval:
    return BidInterval(
        agent_id=agent_id, bid=bid, monthly_budget=monthly, start_date=start, end_date=end, priority=priority
    )


class TestVolume:
    """Weekday modulation"""

    def test_01_monday_multiplier(self):
        """Monday takes the first multiplier"""
        week = (1.4, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8)
        assert modulate_volume(1000.0, JAN_1, week) == pytest.approx(1400.0)
        assert modulate_volume(1000.0, JAN_1 + dt.timedelta(days=5), week) == pytest.approx(800.0)

    def test_02_multipliers_must_average_one(self):
        """A week that inflates total volume is rejected"""
        with pytest.raises(ValidationError):
            region(weekday_multipliers=(1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0))


class TestAllowance:
    """Daily share of the monthly budget"""

    def test_01_remaining_rule(self):
        """Unallocated budget over the days left in the month"""
        ledger = AgentLedger(agent_id="a", monthly_budget=310.0).for_day(JAN_1, 310.0)
        assert daily_allowance(ledger, JAN_1, region()) == pytest.approx(10.0)

    def test_02_flat_rule(self):
        """Monthly budget over the configured month length"""
        ledger = AgentLedger(agent_id="a", monthly_budget=310.0).for_day(JAN_1, 310.0)
        assert daily_allowance(ledger, JAN_1, region(allowance_rule="flat")) == pytest.approx(310.0 / 30)

    def test_03_new_month_starts_fresh(self):
        """Spend and carryover do not cross a month boundary"""
        ledger = AgentLedger(agent_id="a", monthly_budget=100.0, month=(2024, 1), spent=60.0, carryover=5.0)
        fresh = ledger.for_day(dt.date(2024, 2, 1), 100.0)
        assert fresh.spent == 0.0 and fresh.carryover == 0.0
        assert fresh.month == (2024, 2)


class TestRunDay:
    """One replayed day"""

    def test_01_unconstrained_spend_and_carryover(self):
        """Spend is pi·eCPM·volume/1000; the rest carries over"""
        bids = [ScheduledBid(agent_id="a", bid=30.0, monthly_budget=310.0, priority=1)]
        day = run_day(region(), JAN_1, {}, bids)
        assert day.spend("a") == pytest.approx(3.3)
        assert day.state["a"].carryover == pytest.approx(6.7)

        second = run_day(region(), JAN_1 + dt.timedelta(days=1), day.state, bids)
        (row,) = second.ledgers
        assert row.allowance == pytest.approx(10.0)
        assert row.available == pytest.approx(16.7)

    def test_02_binding_budget_spends_the_allowance(self):
        """A one-per-mille budget against eCPM 3.3 is paced to spend it exactly"""
        bids = [ScheduledBid(agent_id="a", bid=30.0, monthly_budget=31.0, priority=1)]
        day = run_day(region(), JAN_1, {}, bids)
        assert day.outcomes.pi[0] == pytest.approx(1.0 / 3.3, abs=1e-7)
        assert day.spend("a") == pytest.approx(1.0, abs=1e-6)
        assert day.state["a"].carryover == pytest.approx(0.0, abs=1e-6)

    def test_03_zero_volume_day(self):
        """No impressions, no spend"""
        bids = [ScheduledBid(agent_id="a", bid=30.0, monthly_budget=310.0, priority=1)]
        day = run_day(region(base_daily_volume=0.0), JAN_1, {}, bids)
        assert day.spend("a") == 0.0
        assert day.converged

    def test_04_below_reserve_row(self):
        """Agents under the reserve appear inactive with zero outcomes"""
        bids = [
            ScheduledBid(agent_id="a", bid=30.0, monthly_budget=310.0, priority=1),
            ScheduledBid(agent_id="z", bid=5.0, monthly_budget=310.0, priority=2),
        ]
        rows = {r["agent_id"]: r for r in run_day(region(), JAN_1, {}, bids).outcome_rows()}
        assert rows["z"]["active"] == 0
        assert rows["z"]["pi"] == 0.0 and rows["z"]["spend"] == 0.0
        assert rows["a"]["active"] == 1

    def test_05_unknown_agent_spend(self):
        """Asking for an agent not scheduled that day is invalid"""
        bids = [ScheduledBid(agent_id="a", bid=30.0, monthly_budget=310.0, priority=1)]
        with pytest.raises(InvalidInputError):
            run_day(region(), JAN_1, {}, bids).spend("b")

    def test_06_budgets_carry_the_leftover(self):
        """The next day paces with allowance plus carryover per mille of volume"""
        bids = [ScheduledBid(agent_id="a", bid=30.0, monthly_budget=310.0, priority=1)]
        first = run_day(region(), JAN_1, {}, bids)
        tomorrow = JAN_1 + dt.timedelta(days=1)
        assert day_budgets(region(), tomorrow, first.state, bids) == {"a": pytest.approx(16.7)}
        assert run_day(region(), tomorrow, first.state, bids).budgets_per_mille == {"a": pytest.approx(16.7)}


class TestBidSchedule:
    """Standing bids over time"""

    def test_01_bids_on_a_day(self):
        """Only covering intervals stand"""
        schedule = BidSchedule(
            [
                interval("a", 20.0, 100.0, JAN_1, dt.date(2024, 1, 10)),
                interval("a", 25.0, 100.0, dt.date(2024, 1, 11), dt.date(2024, 1, 20)),
                interval("b", 15.0, 50.0, dt.date(2024, 1, 5), dt.date(2024, 1, 6), priority=2),
            ]
        )
        assert [b.bid for b in schedule.bids_on(dt.date(2024, 1, 11))] == [25.0]
        assert len(schedule.bids_on(dt.date(2024, 1, 5))) == 2
        assert len(schedule.dates()) == 20

    def test_02_overlap_rejected(self):
        """An agent cannot hold two bids on one day"""
        with pytest.raises(InvalidInputError, match="overlapping"):
            BidSchedule(
                [
                    interval("a", 20.0, 100.0, JAN_1, dt.date(2024, 1, 10)),
                    interval("a", 25.0, 100.0, dt.date(2024, 1, 10), dt.date(2024, 1, 20)),
                ]
            )

    def test_03_priority_must_not_change(self):
        """Tie priority is fixed per agent"""
        with pytest.raises(InvalidInputError):
            BidSchedule(
                [
                    interval("a", 20.0, 100.0, JAN_1, JAN_1, priority=1),
                    interval("a", 20.0, 100.0, dt.date(2024, 1, 2), dt.date(2024, 1, 2), priority=2),
                ]
            )

    def test_04_empty_schedule(self):
        """Nothing to replay"""
        with pytest.raises(InvalidInputError):
            BidSchedule([])

    def test_05_end_before_start(self):
        """Interval dates must be ordered"""
        with pytest.raises(ValidationError):
            interval("a", 20.0, 100.0, dt.date(2024, 1, 5), JAN_1)


class TestSimulateRegion:
    """Full replay"""

    def test_01_month_boundary_resets_budget(self):
        """The first of the month starts a fresh allowance with no carryover"""
        schedule = BidSchedule([interval("a", 30.0, 310.0, dt.date(2024, 1, 30), dt.date(2024, 2, 2))])
        run = simulate_region(region(), schedule)
        feb_1 = next(row for day in run.days for row in day.ledgers if row.date == dt.date(2024, 2, 1))
        assert feb_1.carryover == 0.0
        assert feb_1.allowance == pytest.approx(310.0 / 29)
        assert run.monthly_spend()[("a", 2024, 1)] == pytest.approx(6.6)

    def test_02_monthly_spend_within_budget(self):
        """No agent spends more than its monthly budget in any month"""
        schedule = BidSchedule(
            [
                interval("a", 30.0, 40.0, JAN_1, dt.date(2024, 3, 10), priority=1),
                interval("b", 25.0, 60.0, dt.date(2024, 1, 15), dt.date(2024, 3, 10), priority=2),
                interval("c", 12.0, 500.0, JAN_1, dt.date(2024, 2, 20), priority=3),
            ]
        )
        budgets = {"a": 40.0, "b": 60.0, "c": 500.0}
        run = simulate_region(region(weekday_multipliers=(1.15, 1.0, 0.97, 0.95, 0.9, 0.88, 1.15)), schedule)
        assert not run.flagged_days
        for (agent_id, _, _), total in run.monthly_spend().items():
            assert total <= budgets[agent_id] + 1e-6

    def test_03_rows_cover_every_scheduled_day(self):
        """One outcome row per agent per scheduled day"""
        schedule = BidSchedule(
            [
                interval("a", 30.0, 100.0, JAN_1, dt.date(2024, 1, 5)),
                interval("b", 20.0, 100.0, dt.date(2024, 1, 3), dt.date(2024, 1, 7), priority=2),
            ]
        )
        run = simulate_region(region(), schedule)
        assert len(run.days) == 7
        assert len(run.outcome_rows()) == 10
        assert len(run.ledger_rows()) == 10
