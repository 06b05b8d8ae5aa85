"""
Day-by-day replay of one region.

Each day every scheduled agent gets an allowance from its monthly budget,
adds yesterday's carryover, and the available amount becomes a per-mille
budget over the day's modulated impression volume. Pacing then fixes every
filtering probability and the day's expected spend is charged.
"""

from __future__ import annotations

import calendar
import datetime as dt
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from paced_gsp.engine import OutcomeTable, outcomes_dp
from paced_gsp.errors import InvalidInputError
from paced_gsp.market import Bidder, MarketSnapshot, PositionWeights
from paced_gsp.pacing import solve_pacing_with_retry

logger = logging.getLogger(__name__)

AllowanceRule = Literal["remaining", "flat"]

FLAT_WEEK = (1.0,) * 7
SPEND_TOL = 1e-9


# ============================================
# REGION
# ============================================

def modulate_volume(base: float, date: dt.date, multipliers: tuple[float, ...] = FLAT_WEEK) -> float:
    """``base`` scaled by the weekday multiplier of ``date`` (Monday first)."""
    return base * multipliers[date.weekday()]


class RegionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    reserve: float = Field(ge=0.0, allow_inf_nan=False)
    weights: PositionWeights = PositionWeights()
    days_in_month: int = Field(default=30, ge=1)
    weekday_multipliers: tuple[float, float, float, float, float, float, float] = FLAT_WEEK
    base_daily_volume: float = Field(ge=0.0, allow_inf_nan=False)
    allowance_rule: AllowanceRule = "remaining"

    @field_validator("weekday_multipliers")
    @classmethod
    def _check_multipliers(cls, multipliers: tuple[float, ...]) -> tuple[float, ...]:
        if any(not m > 0 for m in multipliers):
            raise ValueError(f"weekday multipliers must be positive, got {multipliers}")
        if abs(math.fsum(multipliers) / 7.0 - 1.0) > 1e-9:
            raise ValueError(f"weekday multipliers must average 1, got mean {math.fsum(multipliers) / 7.0!r}")
        return multipliers

    def volume(self, date: dt.date) -> float:
        return modulate_volume(self.base_daily_volume, date, self.weekday_multipliers)


# ============================================
# LEDGERS
# ============================================

class AgentLedger(BaseModel):
    """Month-to-date budget state of one agent."""

    model_config = ConfigDict(frozen=True)

    agent_id: str
    monthly_budget: float = Field(ge=0.0, allow_inf_nan=False)
    month: Optional[tuple[int, int]] = None
    spent: float = 0.0
    carryover: float = Field(default=0.0, ge=0.0)

    def for_day(self, date: dt.date, monthly_budget: float) -> AgentLedger:
        """The state carried into ``date``; a new calendar month starts from nothing."""
        month = (date.year, date.month)
        if month != self.month:
            return AgentLedger(agent_id=self.agent_id, monthly_budget=monthly_budget, month=month)
        return self.model_copy(update={"monthly_budget": monthly_budget})

    @property
    def unallocated(self) -> float:
        return max(0.0, self.monthly_budget - self.spent - self.carryover)


class DailyLedger(BaseModel):
    model_config = ConfigDict(frozen=True)

    date: dt.date
    agent_id: str
    allowance: float = Field(ge=0.0)
    carryover: float = Field(ge=0.0)
    available: float = Field(ge=0.0)
    spend: float = Field(ge=0.0)

    @model_validator(mode="after")
    def _balanced(self) -> DailyLedger:
        if abs(self.available - (self.allowance + self.carryover)) > SPEND_TOL * max(1.0, self.available):
            raise ValueError(f"{self.agent_id} on {self.date}: available != allowance + carryover")
        if self.spend > self.available + SPEND_TOL:
            raise ValueError(f"{self.agent_id} on {self.date}: spend {self.spend} exceeds available {self.available}")
        return self


def daily_allowance(ledger: AgentLedger, date: dt.date, region: RegionConfig) -> float:
    if region.allowance_rule == "flat":
        return min(ledger.monthly_budget / region.days_in_month, ledger.unallocated)
    days_left = calendar.monthrange(date.year, date.month)[1] - date.day + 1
    return ledger.unallocated / days_left


# ============================================
# ONE DAY
# ============================================

class ScheduledBid(BaseModel):
    """An agent's standing bid and monthly budget on a given day."""

    model_config = ConfigDict(frozen=True)

    agent_id: str
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    monthly_budget: float = Field(ge=0.0, allow_inf_nan=False)
    priority: int


@dataclass(frozen=True)
class DayResult:
    date: dt.date
    volume: float
    outcomes: OutcomeTable
    ledgers: tuple[DailyLedger, ...]
    state: dict[str, AgentLedger]
    bids: tuple[ScheduledBid, ...]
    budgets_per_mille: dict[str, float]
    converged: bool

    def spend(self, agent_id: str) -> float:
        for row in self.ledgers:
            if row.agent_id == agent_id:
                return row.spend
        raise InvalidInputError(f"{agent_id!r} was not scheduled on {self.date}")

    def outcome_rows(self) -> list[dict]:
        """One row per scheduled agent; agents below the reserve are inactive with zero outcomes."""
        spend = {row.agent_id: row.spend for row in self.ledgers}
        rows = []
        for scheduled in sorted(self.bids, key=lambda b: b.agent_id):
            active = scheduled.agent_id in self.outcomes.bidder_ids
            k = self.outcomes.index(scheduled.agent_id) if active else None
            rows.append(
                {
                    "date": self.date,
                    "agent_id": scheduled.agent_id,
                    "pi": float(self.outcomes.pi[k]) if active else 0.0,
                    "eq": float(self.outcomes.eq[k]) if active else 0.0,
                    "ecpm": float(self.outcomes.ecpm[k]) if active else 0.0,
                    "spend": spend[scheduled.agent_id],
                    "volume": self.volume,
                    "bid": scheduled.bid,
                    "budget_per_mille": self.budgets_per_mille[scheduled.agent_id],
                    "priority": scheduled.priority,
                    "active": int(active),
                }
            )
        return rows

    def ledger_rows(self) -> list[dict]:
        return [row.model_dump() for row in sorted(self.ledgers, key=lambda r: r.agent_id)]


def _carry_in(
    region: RegionConfig,
    date: dt.date,
    ledgers: Mapping[str, AgentLedger],
    bids: tuple[ScheduledBid, ...],
) -> tuple[dict[str, AgentLedger], dict[str, float], dict[str, float], dict[str, float]]:
    volume = region.volume(date)
    carried: dict[str, AgentLedger] = {}
    allowance: dict[str, float] = {}
    available: dict[str, float] = {}
    budgets: dict[str, float] = {}
    for scheduled in bids:
        ledger = ledgers.get(scheduled.agent_id) or AgentLedger(
            agent_id=scheduled.agent_id, monthly_budget=scheduled.monthly_budget
        )
        ledger = ledger.for_day(date, scheduled.monthly_budget)
        carried[scheduled.agent_id] = ledger
        allowance[scheduled.agent_id] = daily_allowance(ledger, date, region)
        available[scheduled.agent_id] = allowance[scheduled.agent_id] + ledger.carryover
        budgets[scheduled.agent_id] = available[scheduled.agent_id] * 1000.0 / volume if volume > 0 else math.inf
    return carried, allowance, available, budgets


def day_budgets(
    region: RegionConfig,
    date: dt.date,
    ledgers: Mapping[str, AgentLedger],
    bids: Iterable[ScheduledBid],
) -> dict[str, float]:
    """Per-mille budgets ``run_day`` paces with: allowance plus carryover over the day's volume."""
    return _carry_in(region, date, ledgers, tuple(bids))[3]


def run_day(
    region: RegionConfig,
    date: dt.date,
    ledgers: Mapping[str, AgentLedger],
    bids: Iterable[ScheduledBid],
) -> DayResult:
    """
    Replay one day: allowances, pacing at the day's volume, spend charged, carryover updated.

    ``ledgers`` is not modified; the returned ``state`` holds every agent's
    ledger after the day. A pacing solve that misses tolerance is kept and
    flagged through ``converged``.
    """
    bids = tuple(bids)
    volume = region.volume(date)
    carried, allowance, available, budgets = _carry_in(region, date, ledgers, bids)

    market = MarketSnapshot(
        bidders=tuple(
            Bidder(id=b.agent_id, bid=b.bid, budget_per_mille=budgets[b.agent_id], priority=b.priority)
            for b in bids
        ),
        reserve=region.reserve,
        weights=region.weights,
    )

    converged = True
    if volume > 0:
        solution = solve_pacing_with_retry(market)
        outcomes = solution.outcomes
        converged = solution.converged
        if not converged:
            logger.warning(f"Day {date} flagged: pacing residual {solution.residual_inf_norm:.3e}")
    else:
        outcomes = outcomes_dp(market)

    spend = dict.fromkeys(available, 0.0)
    if volume > 0 and len(outcomes):
        charged = outcomes.unconditional_spend * volume / 1000.0
        for agent_id, amount in zip(outcomes.bidder_ids, charged.tolist()):
            spend[agent_id] = min(amount, available[agent_id])

    state = dict(ledgers)
    rows = []
    for agent_id, ledger in carried.items():
        rows.append(
            DailyLedger(
                date=date,
                agent_id=agent_id,
                allowance=allowance[agent_id],
                carryover=ledger.carryover,
                available=available[agent_id],
                spend=spend[agent_id],
            )
        )
        state[agent_id] = ledger.model_copy(
            update={
                "spent": ledger.spent + spend[agent_id],
                "carryover": max(0.0, available[agent_id] - spend[agent_id]),
            }
        )

    return DayResult(date, volume, outcomes, tuple(rows), state, bids, budgets, converged)


# ============================================
# FULL REPLAY
# ============================================

class BidInterval(BaseModel):
    """A constant bid held over [start_date, end_date]."""

    model_config = ConfigDict(frozen=True)

    agent_id: str
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    monthly_budget: float = Field(ge=0.0, allow_inf_nan=False)
    start_date: dt.date
    end_date: dt.date
    priority: int

    @model_validator(mode="after")
    def _ordered(self) -> BidInterval:
        if self.end_date < self.start_date:
            raise ValueError(f"{self.agent_id}: end_date {self.end_date} before start_date {self.start_date}")
        return self

    def covers(self, date: dt.date) -> bool:
        return self.start_date <= date <= self.end_date


class BidSchedule:
    """Every agent's bid intervals; answers which bids stand on a given day."""

    def __init__(self, intervals: Iterable[BidInterval]):
        self.intervals = sorted(intervals, key=lambda r: (r.agent_id, r.start_date))
        if not self.intervals:
            raise InvalidInputError("empty bid schedule")
        for prev, cur in zip(self.intervals, self.intervals[1:]):
            if prev.agent_id == cur.agent_id:
                if cur.start_date <= prev.end_date:
                    raise InvalidInputError(
                        f"{cur.agent_id}: overlapping bid intervals at {cur.start_date}"
                    )
                if cur.priority != prev.priority:
                    raise InvalidInputError(f"{cur.agent_id}: priority changes between intervals")

    @property
    def start(self) -> dt.date:
        return min(r.start_date for r in self.intervals)

    @property
    def end(self) -> dt.date:
        return max(r.end_date for r in self.intervals)

    @property
    def agent_ids(self) -> list[str]:
        return sorted({r.agent_id for r in self.intervals})

    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=k) for k in range((self.end - self.start).days + 1)]

    def bids_on(self, date: dt.date) -> list[ScheduledBid]:
        return [
            ScheduledBid(agent_id=r.agent_id, bid=r.bid, monthly_budget=r.monthly_budget, priority=r.priority)
            for r in self.intervals
            if r.covers(date)
        ]


@dataclass(frozen=True)
class RegionRun:
    days: tuple[DayResult, ...]

    @property
    def flagged_days(self) -> list[dt.date]:
        return [day.date for day in self.days if not day.converged]

    def outcome_rows(self) -> list[dict]:
        return [row for day in self.days for row in day.outcome_rows()]

    def ledger_rows(self) -> list[dict]:
        return [row for day in self.days for row in day.ledger_rows()]

    def monthly_spend(self) -> dict[tuple[str, int, int], float]:
        totals: dict[tuple[str, int, int], float] = {}
        for day in self.days:
            for row in day.ledgers:
                key = (row.agent_id, day.date.year, day.date.month)
                totals[key] = totals.get(key, 0.0) + row.spend
        return totals


def simulate_region(region: RegionConfig, schedule: BidSchedule) -> RegionRun:
    """Replay every day the schedule covers, in date order."""
    logger.info(
        f"Simulating {len(schedule.agent_ids)} agents from {schedule.start} to {schedule.end}",
        extra={"reserve": region.reserve, "allowance_rule": region.allowance_rule},
    )
    state: dict[str, AgentLedger] = {}
    days = []
    for date in schedule.dates():
        result = run_day(region, date, state, schedule.bids_on(date))
        state = result.state
        days.append(result)

    run = RegionRun(tuple(days))
    if run.flagged_days:
        logger.warning(f"{len(run.flagged_days)} day(s) did not converge: first {run.flagged_days[0]}")
    total = float(np.sum([row.spend for day in days for row in day.ledgers]))
    logger.info(f"Simulation complete: {len(days)} days, total spend {total:.2f}")
    return run
