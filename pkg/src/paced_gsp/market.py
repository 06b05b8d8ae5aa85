"""
Domain types, unit conversions and validation shared by every module.

Money is a plain float in per-mille units (per 1000 impression opportunities)
unless a name says otherwise (``monthly_budget``, ``available_daily_budget``).
"""

from __future__ import annotations

import datetime as dt
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from paced_gsp.errors import InvalidInputError

DEFAULT_GAMMA = (0.33, 0.28, 0.22, 0.17)
SLOTS_PER_PAGE = 3
N_RANKS = 4


# ============================================
# AUCTION PRIMITIVES
# ============================================

class PositionWeights(BaseModel):
    """Per-rank impression shares; rank j is shown on a page with probability 3·gamma[j]."""

    model_config = ConfigDict(frozen=True)

    gamma: tuple[float, float, float, float] = DEFAULT_GAMMA

    @field_validator("gamma")
    @classmethod
    def _check_gamma(cls, gamma: tuple[float, ...]) -> tuple[float, ...]:
        if any(not 0.0 <= g <= 1.0 for g in gamma):
            raise ValueError(f"gamma entries must lie in [0, 1], got {gamma}")
        if any(gamma[j] < gamma[j + 1] for j in range(N_RANKS - 1)):
            raise ValueError(f"gamma must be nonincreasing, got {gamma}")
        if abs(math.fsum(gamma) - 1.0) > 1e-12:
            raise ValueError(f"gamma must sum to 1 within 1e-12, got {math.fsum(gamma)!r}")
        return gamma

    def reward(self, rank: int) -> float:
        """Impression share of the bidder at 0-based ``rank``; zero beyond the fourth."""
        return self.gamma[rank] if 0 <= rank < N_RANKS else 0.0

    def shown_probability(self, rank: int) -> float:
        return SLOTS_PER_PAGE * self.reward(rank)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=float)


class Bidder(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    budget_per_mille: float = Field(ge=0.0)
    priority: int


class MarketSnapshot(BaseModel):
    """One day's bidders plus the reserve; the active set is everyone bidding at least the reserve."""

    model_config = ConfigDict(frozen=True)

    bidders: tuple[Bidder, ...] = ()
    reserve: float = Field(ge=0.0, allow_inf_nan=False)
    weights: PositionWeights = PositionWeights()

    def get(self, bidder_id: str) -> Bidder:
        for bidder in self.bidders:
            if bidder.id == bidder_id:
                return bidder
        raise InvalidInputError(f"bidder {bidder_id!r} is not in the market")

    def has(self, bidder_id: str) -> bool:
        return any(b.id == bidder_id for b in self.bidders)

    def without(self, bidder_id: str) -> MarketSnapshot:
        return self.model_copy(
            update={"bidders": tuple(b for b in self.bidders if b.id != bidder_id)}
        )

    def with_bidder(self, bidder: Bidder) -> MarketSnapshot:
        """Insert ``bidder``, replacing any existing bidder with the same id."""
        kept = tuple(b for b in self.bidders if b.id != bidder.id)
        return self.model_copy(update={"bidders": kept + (bidder,)})

    def with_bid(self, bidder_id: str, bid: float) -> MarketSnapshot:
        return self.with_bidder(self.get(bidder_id).model_copy(update={"bid": bid}))

    def scaled(self, tau: float) -> MarketSnapshot:
        """Scale every bid and the reserve by ``tau``; budgets are left alone."""
        if not tau > 0:
            raise InvalidInputError(f"scale factor must be positive, got {tau}")
        return self.model_copy(
            update={
                "bidders": tuple(b.model_copy(update={"bid": b.bid * tau}) for b in self.bidders),
                "reserve": self.reserve * tau,
            }
        )

    def next_priority(self) -> int:
        """A priority below every current bidder's (loses all ties)."""
        return max((b.priority for b in self.bidders), default=0) + 1


def canonical_key(bidder: Bidder) -> tuple[float, int, str]:
    return (-bidder.bid, bidder.priority, bidder.id)


def canonical_sort(market: MarketSnapshot) -> list[Bidder]:
    """
    Active bidders in canonical order: bid descending, then priority, then id.

    Bidders below the reserve are dropped; a bid exactly at the reserve stays.

    Raises:
        InvalidInputError: duplicate priorities or duplicate ids.
    """
    priorities = [b.priority for b in market.bidders]
    if len(set(priorities)) != len(priorities):
        raise InvalidInputError("duplicate bidder priorities in market")
    ids = [b.id for b in market.bidders]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate bidder ids in market")

    active = [b for b in market.bidders if b.bid >= market.reserve]
    return sorted(active, key=canonical_key)


# ============================================
# BUDGETS
# ============================================

def convert_budget(monthly_budget: float, page_views_thousands: float) -> float:
    """Per-mille budget B = 3·monthly_budget / NP (three ad opportunities per page view)."""
    if not page_views_thousands > 0 or not math.isfinite(page_views_thousands):
        raise InvalidInputError(
            f"page_views_thousands must be positive, got {page_views_thousands}"
        )
    if not monthly_budget >= 0:
        raise InvalidInputError(f"monthly_budget must be nonnegative, got {monthly_budget}")
    return SLOTS_PER_PAGE * monthly_budget / page_views_thousands


class BudgetConversion(BaseModel):
    model_config = ConfigDict(frozen=True)

    monthly_budget: float = Field(ge=0.0)
    page_views_thousands: float = Field(gt=0.0)

    @property
    def per_mille(self) -> float:
        return convert_budget(self.monthly_budget, self.page_views_thousands)


# ============================================
# BID TRACES
# ============================================

class BidRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    date: dt.date
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    available_daily_budget: float = Field(default=0.0, ge=0.0)
    recommended_bid: Optional[float] = Field(default=None, ge=0.0)
    active: bool = True


class BidTrace(BaseModel):
    """Per-day bidding history of one agent."""

    model_config = ConfigDict(frozen=True)

    agent_id: str
    records: tuple[BidRecord, ...] = ()

    @model_validator(mode="after")
    def _dates_strictly_increasing(self) -> BidTrace:
        for prev, cur in zip(self.records, self.records[1:]):
            if cur.date <= prev.date:
                raise ValueError(
                    f"trace {self.agent_id!r}: dates must be strictly increasing "
                    f"({prev.date} then {cur.date})"
                )
        return self

    @property
    def active_records(self) -> tuple[BidRecord, ...]:
        return tuple(r for r in self.records if r.active)

    @property
    def active_days(self) -> int:
        return len(self.active_records)

    @property
    def first_active_day(self) -> Optional[dt.date]:
        active = self.active_records
        return active[0].date if active else None

    @property
    def active_duration(self) -> int:
        """Calendar days from the first to the last active day, inclusive."""
        active = self.active_records
        if not active:
            return 0
        return (active[-1].date - active[0].date).days + 1

    @property
    def bid_change_count(self) -> int:
        active = self.active_records
        return sum(1 for prev, cur in zip(active, active[1:]) if cur.bid != prev.bid)

    @property
    def bid_change_frequency(self) -> float:
        days = self.active_days
        return self.bid_change_count / days if days else 0.0

    def bid_change_events(self) -> list[BidRecord]:
        """The first active day (initial bid choice) and every active day with a new bid."""
        active = self.active_records
        if not active:
            return []
        return [active[0]] + [
            cur for prev, cur in zip(active, active[1:]) if cur.bid != prev.bid
        ]

    def tenure_month(self, day: dt.date, month_days: int = 30) -> int:
        start = self.first_active_day
        if start is None:
            raise InvalidInputError(f"trace {self.agent_id!r} has no active days")
        return (day - start).days // month_days

    @property
    def has_recommendations(self) -> bool:
        return all(r.recommended_bid is not None for r in self.active_records)
