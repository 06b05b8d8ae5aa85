"""
Synthetic regions for exercising the whole pipeline.

Region and agent parameters are lognormal draws matched to configured
means and standard deviations. Agents then bid day by day under one of
four scripted policies:

- fixed: keeps the initial bid;
- random_walk: multiplies the bid by a mean-one lognormal shock;
- best_response: bids inside the best step for a planted value, with noise;
- follower: adopts the day's recommended bid with a probability that
  ramps up with tenure, otherwise behaves like random_walk.

Every draw comes from a generator seeded by (seed, region index), so a
region is reproducible on its own.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from paced_gsp.engine import ProbeField, probe_field_for
from paced_gsp.errors import InvalidInputError
from paced_gsp.io import (
    BIDDER_COLUMNS,
    TRACE_COLUMNS,
    BidderRow,
    MarketConfig,
    RegionParams,
    round_sig,
    trace_rows,
    write_csv,
    write_json,
)
from paced_gsp.market import DEFAULT_GAMMA, Bidder, BidRecord, BidTrace, MarketSnapshot
from paced_gsp.pacing import solve_pacing_with_retry
from paced_gsp.recommender import recommend_bid
from paced_gsp.simulator import AgentLedger, AllowanceRule, DayResult, RegionRun, ScheduledBid, day_budgets, run_day

logger = logging.getLogger(__name__)

CALIBRATION_FILE = "calibration.yaml"
MIN_BID = 0.01


# ============================================
# SPEC
# ============================================

class Moments(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float = Field(gt=0.0, allow_inf_nan=False)
    std: float = Field(ge=0.0, allow_inf_nan=False)

    def lognormal(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray | float:
        sigma2 = math.log1p((self.std / self.mean) ** 2)
        return rng.lognormal(math.log(self.mean) - sigma2 / 2.0, math.sqrt(sigma2), size)

    def normal(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray | float:
        return rng.normal(self.mean, self.std, size)


class Policy(str, Enum):
    FIXED = "fixed"
    RANDOM_WALK = "random_walk"
    BEST_RESPONSE = "best_response"
    FOLLOWER = "follower"


class PolicyMix(BaseModel):
    model_config = ConfigDict(frozen=True)

    fixed: float = Field(default=0.25, ge=0.0)
    random_walk: float = Field(default=0.25, ge=0.0)
    best_response: float = Field(default=0.25, ge=0.0)
    follower: float = Field(default=0.25, ge=0.0)

    @model_validator(mode="after")
    def _some_weight(self) -> PolicyMix:
        if self.fixed + self.random_walk + self.best_response + self.follower <= 0:
            raise ValueError("policy mix needs a positive weight")
        return self

    def probabilities(self) -> tuple[list[Policy], np.ndarray]:
        policies = list(Policy)
        weights = np.array([getattr(self, p.value) for p in policies], dtype=float)
        return policies, weights / weights.sum()


class BestResponseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    value_markup: Moments = Moments(mean=1.3, std=0.2)
    noise: float = Field(default=0.02, ge=0.0, lt=1.0)


class FollowerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    initial_adoption: float = Field(default=0.2, ge=0.0, le=1.0)
    adoption_ramp: float = Field(default=0.25, ge=0.0)
    rate_multiplier: float = Field(default=2.0, gt=0.0)

    def adoption(self, month: int) -> float:
        return min(1.0, self.initial_adoption + self.adoption_ramp * month)


class SyntheticMarketSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: Optional[int] = Field(default=None, ge=0)
    n_regions: int = Field(default=1, ge=1)
    n_days: int = Field(default=180, ge=1)
    start_date: dt.date = dt.date(2024, 1, 1)
    days_in_month: int = Field(default=30, ge=1)
    allowance_rule: AllowanceRule = "remaining"

    agents: Moments = Moments(mean=10.74, std=5.32)
    bids: Moments = Moments(mean=18.79, std=9.71)
    daily_budget: Moments = Moments(mean=9.22, std=4.96)
    active_duration: Moments = Moments(mean=96.04, std=20.74)
    reserve: Moments = Moments(mean=13.39, std=9.55)
    bid_change_rate: Moments = Moments(mean=0.22, std=0.28)
    daily_volume: Moments = Moments(mean=5290.0, std=3190.0)

    weekday_multipliers: tuple[float, float, float, float, float, float, float] = (1.0,) * 7
    policy_mix: PolicyMix = PolicyMix()
    random_walk_sigma: float = Field(default=0.1, ge=0.0)
    best_response: BestResponseConfig = BestResponseConfig()
    follower: FollowerConfig = FollowerConfig()

    @classmethod
    def from_yaml(cls, path: Optional[str | Path] = None, **overrides) -> SyntheticMarketSpec:
        """Spec from ``path`` (the packaged calibration when None), with keyword overrides on top."""
        if path is None:
            text = resources.files("paced_gsp.config").joinpath(CALIBRATION_FILE).read_text(encoding="utf-8")
        else:
            path = Path(path)
            if not path.is_file():
                raise InvalidInputError(f"{path}: file not found")
            text = path.read_text(encoding="utf-8")
        payload = yaml.safe_load(text) or {}
        payload.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(payload)

    def rng(self, region_index: int, stream: int) -> np.random.Generator:
        if self.seed is None:
            raise InvalidInputError("synthetic markets need a seed")
        return np.random.default_rng([self.seed, region_index, stream])

    def market_config(self, reserve: float, base_daily_volume: float) -> MarketConfig:
        return MarketConfig(
            reserve=reserve,
            gamma=DEFAULT_GAMMA,
            page_views_thousands=3.0 * base_daily_volume * self.days_in_month / 1000.0,
            region=RegionParams(
                days_in_month=self.days_in_month,
                weekday_multipliers=self.weekday_multipliers,
                base_daily_volume=base_daily_volume,
                allowance_rule=self.allowance_rule,
            ),
        )


# ============================================
# POPULATION DRAWS
# ============================================

class AgentProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: str
    policy: Policy
    priority: int
    initial_bid: float
    daily_budget_per_mille: float
    monthly_budget: float
    start_date: dt.date
    end_date: dt.date
    change_probability: float = Field(ge=0.0, le=1.0)
    value: Optional[float] = None

    @property
    def active_duration(self) -> int:
        return (self.end_date - self.start_date).days + 1

    def covers(self, date: dt.date) -> bool:
        return self.start_date <= date <= self.end_date


class RegionDraw(BaseModel):
    model_config = ConfigDict(frozen=True)

    region_id: str
    reserve: float
    base_daily_volume: float
    bid_change_rate: float
    agents: tuple[AgentProfile, ...]


def sample_region(spec: SyntheticMarketSpec, region_index: int) -> RegionDraw:
    rng = spec.rng(region_index, 0)
    n = max(1, int(round(float(spec.agents.lognormal(rng)))))
    reserve = round(float(spec.reserve.lognormal(rng)), 2)
    volume = float(max(1, round(float(spec.daily_volume.lognormal(rng)))))
    rate = float(spec.bid_change_rate.lognormal(rng))

    durations = np.clip(np.rint(spec.active_duration.normal(rng, n)), 1, spec.n_days).astype(int)
    offsets = np.array([rng.integers(0, spec.n_days - d + 1) for d in durations])
    bids = np.maximum(np.round(spec.bids.lognormal(rng, n), 2), MIN_BID)
    budgets = spec.daily_budget.lognormal(rng, n)
    policies_available, mix = spec.policy_mix.probabilities()
    policies = [policies_available[k] for k in rng.choice(len(mix), size=n, p=mix)]
    heterogeneity = rng.exponential(1.0, n)
    priorities = rng.permutation(n) + 1
    markups = np.maximum(spec.best_response.value_markup.normal(rng, n), 1.0)

    active_per_day = max(float(durations.sum()) / spec.n_days, 1.0)
    agents = []
    for k in range(n):
        monthly = round(float(budgets[k]) * volume / 1000.0 * spec.days_in_month, 2)
        policy = policies[k]
        boost = spec.follower.rate_multiplier if policy is Policy.FOLLOWER else 1.0
        change = 0.0 if policy is Policy.FIXED else min(1.0, rate * heterogeneity[k] * boost / active_per_day)
        start = spec.start_date + dt.timedelta(days=int(offsets[k]))
        agents.append(
            AgentProfile(
                agent_id=f"agent_{k:03d}",
                policy=policy,
                priority=int(priorities[k]),
                initial_bid=float(bids[k]),
                daily_budget_per_mille=monthly * 1000.0 / (volume * spec.days_in_month),
                monthly_budget=monthly,
                start_date=start,
                end_date=start + dt.timedelta(days=int(durations[k]) - 1),
                change_probability=float(change),
                value=round(float(bids[k] * markups[k]), 2) if policy is Policy.BEST_RESPONSE else None,
            )
        )
    return RegionDraw(
        region_id=f"region_{region_index:03d}",
        reserve=reserve,
        base_daily_volume=volume,
        bid_change_rate=rate,
        agents=tuple(agents),
    )


def sample_population(spec: SyntheticMarketSpec) -> list[RegionDraw]:
    return [sample_region(spec, k) for k in range(spec.n_regions)]


class PopulationSummary(BaseModel):
    """Means and standard deviations of the drawn population, by the quantity calibrated."""

    model_config = ConfigDict(frozen=True)

    regions: int
    agents: Moments
    bids: Moments
    daily_budget: Moments
    active_duration: Moments
    reserve: Moments
    bid_change_rate: Moments
    daily_volume: Moments

    def relative_errors(self, spec: SyntheticMarketSpec) -> dict[str, float]:
        names = ("agents", "bids", "daily_budget", "active_duration", "reserve", "bid_change_rate", "daily_volume")
        return {name: abs(getattr(self, name).mean / getattr(spec, name).mean - 1.0) for name in names}


def _moments(values: Iterable[float]) -> Moments:
    data = np.asarray(list(values), dtype=float)
    std = float(data.std(ddof=1)) if data.size > 1 else 0.0
    return Moments(mean=float(data.mean()), std=std)


def summarize_population(draws: Iterable[RegionDraw]) -> PopulationSummary:
    draws = list(draws)
    if not draws:
        raise InvalidInputError("no regions to summarize")
    agents = [a for d in draws for a in d.agents]
    return PopulationSummary(
        regions=len(draws),
        agents=_moments(len(d.agents) for d in draws),
        bids=_moments(a.initial_bid for a in agents),
        daily_budget=_moments(a.daily_budget_per_mille for a in agents),
        active_duration=_moments(a.active_duration for a in agents),
        reserve=_moments(d.reserve for d in draws),
        bid_change_rate=_moments(d.bid_change_rate for d in draws),
        daily_volume=_moments(d.base_daily_volume for d in draws),
    )


# ============================================
# POLICIES
# ============================================

def best_response_bid(field: ProbeField, value: float, priority: int) -> float:
    """
    Middle of the bid step maximizing value·eQ - eCPM against frozen opponents.

    Steps are cut at the reserve and at every opponent bid; the top step is
    represented by 10% above the highest bid. When no step pays, the bid
    drops below the reserve.
    """
    reserve = field.reserve
    edges = np.unique(np.concatenate(([reserve], field.opponent_bids)))
    edges = edges[edges >= reserve]
    probes = [(lo + hi) / 2.0 for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    probes.append(max(edges[-1], MIN_BID) * 1.1)
    probes = np.asarray(probes)
    eq, ecpm = field.evaluate(probes, priority)
    utility = value * eq - ecpm
    best = int(np.argmax(utility))
    if utility[best] < 0.0:
        return reserve * 0.9
    return float(probes[best])


# ============================================
# GENERATION
# ============================================

@dataclass(frozen=True)
class RegionDataset:
    draw: RegionDraw
    config: MarketConfig
    bidders: tuple[BidderRow, ...]
    traces: tuple[BidTrace, ...]
    run: RegionRun

    @property
    def region_id(self) -> str:
        return self.draw.region_id

    def profile_rows(self) -> list[dict]:
        return [a.model_dump() for a in self.draw.agents]

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        write_json(directory / "market.json", self.config.model_dump(mode="json"))
        write_csv(directory / "bidders.csv", [r.model_dump() for r in self.bidders], BIDDER_COLUMNS)
        write_csv(directory / "traces.csv", trace_rows(self.traces), TRACE_COLUMNS)
        write_csv(directory / "profiles.csv", self.profile_rows(), tuple(AgentProfile.model_fields))
        return directory


class _RegionGenerator:
    """Runs one region's policies day by day alongside the replay."""

    def __init__(self, spec: SyntheticMarketSpec, draw: RegionDraw, region_index: int):
        self.spec = spec
        self.draw = draw
        self.rng = spec.rng(region_index, 1)
        self.config = spec.market_config(draw.reserve, draw.base_daily_volume)
        self.region = self.config.region_config()
        self.current: dict[str, float] = {}
        self.records: dict[str, list[BidRecord]] = {a.agent_id: [] for a in draw.agents}
        self.intervals: dict[str, list[list]] = {a.agent_id: [] for a in draw.agents}

    def _walk(self, bid: float) -> float:
        sigma = self.spec.random_walk_sigma
        shock = math.exp(sigma * float(self.rng.standard_normal()) - sigma * sigma / 2.0)
        return max(round(bid * shock, 2), MIN_BID)

    def _decide(
        self,
        agent: AgentProfile,
        date: dt.date,
        recommended: float,
        market: MarketSnapshot,
        pi: dict[str, float],
    ) -> float:
        month = (date - agent.start_date).days // self.spec.days_in_month
        follower = agent.policy is Policy.FOLLOWER
        if agent.agent_id not in self.current:
            if follower and self.rng.random() < self.spec.follower.adoption(month):
                return recommended
            return agent.initial_bid

        bid = self.current[agent.agent_id]
        if agent.policy is Policy.FIXED or self.rng.random() >= agent.change_probability:
            return bid
        if agent.policy is Policy.RANDOM_WALK:
            return self._walk(bid)
        if agent.policy is Policy.BEST_RESPONSE:
            field = probe_field_for(market, pi, agent.agent_id)
            target = best_response_bid(field, agent.value, agent.priority)
            noise = self.spec.best_response.noise * float(self.rng.uniform(-1.0, 1.0))
            return max(round(target * (1.0 + noise), 2), MIN_BID)
        if self.rng.random() < self.spec.follower.adoption(month):
            return recommended
        return self._walk(bid)

    def _day(self, date: dt.date, state: dict[str, AgentLedger]) -> Optional[DayResult]:
        active = [a for a in self.draw.agents if a.covers(date)]
        if not active:
            return None

        def scheduled() -> list[ScheduledBid]:
            return [
                ScheduledBid(
                    agent_id=a.agent_id,
                    bid=self.current.get(a.agent_id, a.initial_bid),
                    monthly_budget=a.monthly_budget,
                    priority=a.priority,
                )
                for a in active
            ]

        # the replay's allowance plus carryover; the nominal budget on days without volume
        carried = day_budgets(self.region, date, state, scheduled())
        budgets = {
            a.agent_id: carried[a.agent_id] if math.isfinite(carried[a.agent_id]) else a.daily_budget_per_mille
            for a in active
        }
        standing = MarketSnapshot(
            bidders=tuple(
                Bidder(
                    id=a.agent_id,
                    bid=self.current.get(a.agent_id, a.initial_bid),
                    budget_per_mille=budgets[a.agent_id],
                    priority=a.priority,
                )
                for a in active
            ),
            reserve=self.config.reserve,
            weights=self.config.weights,
        )
        pi = solve_pacing_with_retry(standing).pi_by_id()
        recommended = {
            a.agent_id: round_sig(
                recommend_bid(
                    standing, budgets[a.agent_id], bidder_id=a.agent_id, coupling="frozen", opponent_pi=pi
                ).bid
            )
            for a in active
        }

        for agent in active:
            self.current[agent.agent_id] = self._decide(agent, date, recommended[agent.agent_id], standing, pi)

        result = run_day(self.region, date, state, scheduled())
        available = {row.agent_id: row.available for row in result.ledgers}
        for agent in active:
            bid = self.current[agent.agent_id]
            self.records[agent.agent_id].append(
                BidRecord(
                    date=date,
                    bid=bid,
                    available_daily_budget=available[agent.agent_id],
                    recommended_bid=recommended[agent.agent_id],
                    active=True,
                )
            )
            spans = self.intervals[agent.agent_id]
            if spans and spans[-1][0] == bid and spans[-1][2] == date - dt.timedelta(days=1):
                spans[-1][2] = date
            else:
                spans.append([bid, date, date])
        return result

    def run(self) -> RegionDataset:
        state: dict[str, AgentLedger] = {}
        days = []
        for offset in range(self.spec.n_days):
            result = self._day(self.spec.start_date + dt.timedelta(days=offset), state)
            if result is not None:
                state = result.state
                days.append(result)

        profiles = {a.agent_id: a for a in self.draw.agents}
        bidders = tuple(
            BidderRow(
                agent_id=agent_id,
                bid=bid,
                monthly_budget=profiles[agent_id].monthly_budget,
                priority=profiles[agent_id].priority,
                start_date=start,
                end_date=end,
            )
            for agent_id, spans in sorted(self.intervals.items())
            for bid, start, end in spans
        )
        traces = tuple(
            BidTrace(agent_id=agent_id, records=tuple(records))
            for agent_id, records in sorted(self.records.items())
            if records
        )
        return RegionDataset(self.draw, self.config, bidders, traces, RegionRun(tuple(days)))


def generate_region(spec: SyntheticMarketSpec, region_index: int = 0) -> RegionDataset:
    draw = sample_region(spec, region_index)
    logger.info(
        f"Generating {draw.region_id}: {len(draw.agents)} agents, reserve {draw.reserve:.2f}",
        extra={"volume": draw.base_daily_volume, "bid_change_rate": draw.bid_change_rate},
    )
    return _RegionGenerator(spec, draw, region_index).run()


def generate_market(spec: SyntheticMarketSpec) -> list[RegionDataset]:
    """Every region of ``spec``; deterministic given its seed."""
    if spec.seed is None:
        raise InvalidInputError("generate_market needs a seed")
    return [generate_region(spec, k) for k in range(spec.n_regions)]
