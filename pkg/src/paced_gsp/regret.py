"""
Regret-based inference of bidder values.

For one agent, each day t fixes the opponents and their filtering
probabilities, so utility per impression opportunity is

    u_t(b, v) = v * eQ_t(b) - eCPM_t(b)

Against a fixed comparison bid b', the agent's average regret at value v is
v * dQ(b') - dC(b') with dQ, dC the day-averaged differences between b' and
the bids actually played. The rationalizable set holds every (v, eps) with
eps >= max_b' (v * dQ(b') - dC(b')); its lowest point gives the value the
agent's play is most consistent with.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from paced_gsp.config.settings import settings
from paced_gsp.engine import ProbeField
from paced_gsp.errors import InvalidInputError, MisalignedHistoryError
from paced_gsp.market import BidRecord, BidTrace, MarketSnapshot, canonical_sort
from paced_gsp.pacing import solve_pacing_with_retry
from paced_gsp.recommender import grid_epsilon

logger = logging.getLogger(__name__)

# tolerance when deciding a hull turn or a tie between regret values
HULL_TOL = 1e-12
UNIT_NORM_TOL = 1e-9
MATCH_TOL = 1e-9


class Classification(str, Enum):
    WORSE = "worse"
    BETTER = "better"
    EQUAL = "equal"


# ============================================
# HISTORY
# ============================================

@dataclass(frozen=True)
class MarketDay:
    """One day of a region: the market, the solved pi of its active bidders, and the impression volume."""

    date: dt.date
    market: MarketSnapshot
    pi: Mapping[str, float]
    volume: float = 1000.0

    def probe(self, agent_id: str) -> tuple[ProbeField, int]:
        """Opponents of ``agent_id`` frozen at this day's pi, and the agent's tie priority."""
        if self.market.has(agent_id):
            priority = self.market.get(agent_id).priority
        else:
            priority = self.market.next_priority()
        opponents = [b for b in self.market.bidders if b.id != agent_id]
        return ProbeField(opponents, self.pi, self.market.reserve, self.market.weights), priority


def align_history(trace: BidTrace, history: Sequence[MarketDay] | Mapping[dt.date, MarketDay]) -> list[tuple[BidRecord, MarketDay]]:
    """
    Pair every active trace day with its market day.

    Raises:
        MisalignedHistoryError: an active day has no market, or the trace has no active day.
    """
    by_date = history if isinstance(history, Mapping) else {day.date: day for day in history}
    records = trace.active_records
    if not records:
        raise MisalignedHistoryError(f"trace {trace.agent_id!r} has no active days")
    missing = [r.date for r in records if r.date not in by_date]
    if missing:
        raise MisalignedHistoryError(
            f"trace {trace.agent_id!r}: no market history for {len(missing)} day(s), first {missing[0]}"
        )
    return [(r, by_date[r.date]) for r in records]


# ============================================
# CURVES
# ============================================

class RegretGridConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    uniform_points: int = Field(default_factory=lambda: settings.regret_uniform_points, ge=0)
    span: float = Field(default_factory=lambda: settings.regret_grid_span, gt=0.0)
    value_grid_multiple: float = Field(default_factory=lambda: settings.value_grid_multiple, gt=0.0)


def candidate_grid(
    days: Sequence[tuple[BidRecord, MarketDay]],
    agent_id: str,
    extra_bids: Iterable[float] = (),
    config: Optional[RegretGridConfig] = None,
) -> np.ndarray:
    """
    Comparison bids: zero, every day's opponent bids plus and minus epsilon,
    the middle of every step between a day's reserve and opponent bids,
    every reserve, the played and extra bids, and uniform points spanning
    [lowest reserve, span × highest bid seen].
    """
    config = config or RegretGridConfig()
    points: list[float] = [0.0]
    reserves = []
    seen = []
    for record, day in days:
        opponents = [b.bid for b in canonical_sort(day.market) if b.id != agent_id]
        eps = grid_epsilon(opponents)
        for bid in opponents:
            points.extend((bid - eps, bid + eps))
        edges = np.unique([day.market.reserve, *(b for b in opponents if b >= day.market.reserve)])
        points.extend(((edges[:-1] + edges[1:]) / 2.0).tolist())
        reserves.append(day.market.reserve)
        seen.extend(opponents)
        seen.append(record.bid)
        points.append(record.bid)
    points.extend(reserves)
    points.extend(extra_bids)

    top = max(seen + reserves, default=0.0) * config.span
    low = min(reserves)
    if config.uniform_points and top > low:
        points.extend(np.linspace(low, top, config.uniform_points).tolist())

    grid = np.unique(np.asarray(points, dtype=float))
    if grid.size == 0:
        raise InvalidInputError("empty comparison grid")
    return grid[grid >= 0.0]


@dataclass(frozen=True)
class DeltaCurves:
    """Day-averaged eQ and eCPM gains of each grid bid over the bids actually played."""

    bids: np.ndarray
    delta_eq: np.ndarray
    delta_ecpm: np.ndarray
    days: int
    won_impressions: float = 0.0

    def regret_at(self, v: float | np.ndarray) -> float | np.ndarray:
        """eps(v) = max over the grid of v·dQ - dC."""
        v_arr = np.atleast_1d(np.asarray(v, dtype=float))
        values = np.max(np.outer(v_arr, self.delta_eq) - self.delta_ecpm, axis=1)
        return float(values[0]) if np.ndim(v) == 0 else values

    def regret_against(self, v: float, b_prime: float) -> float:
        k = int(np.searchsorted(self.bids, b_prime))
        if k >= self.bids.size or self.bids[k] != b_prime:
            raise InvalidInputError(f"bid {b_prime} is not on the comparison grid")
        return float(v * self.delta_eq[k] - self.delta_ecpm[k])


def _day_curves(
    days: Sequence[tuple[BidRecord, MarketDay]],
    agent_id: str,
    grid: np.ndarray,
    played: Sequence[float],
) -> DeltaCurves:
    total_eq = np.zeros(grid.size)
    total_ecpm = np.zeros(grid.size)
    won = 0.0
    for (_, day), bid in zip(days, played):
        probe, priority = day.probe(agent_id)
        eq, ecpm = probe.evaluate(grid, priority)
        own_eq, own_ecpm = probe.evaluate_one(bid, priority)
        total_eq += eq - own_eq
        total_ecpm += ecpm - own_ecpm
        won += float(day.pi.get(agent_id, 1.0)) * own_eq * day.volume
    n = len(days)
    return DeltaCurves(grid, total_eq / n, total_ecpm / n, n, won)


def delta_curves(
    trace: BidTrace,
    history: Sequence[MarketDay] | Mapping[dt.date, MarketDay],
    grid: Optional[np.ndarray] = None,
    config: Optional[RegretGridConfig] = None,
) -> DeltaCurves:
    days = align_history(trace, history)
    if grid is None:
        grid = candidate_grid(days, trace.agent_id, config=config)
    return _day_curves(days, trace.agent_id, grid, [r.bid for r, _ in days])


def average_regret(
    trace: BidTrace,
    history: Sequence[MarketDay] | Mapping[dt.date, MarketDay],
    v: float,
    b_prime: float,
) -> float:
    """(1/T) sum_t u_t(b', v) - (1/T) sum_t u_t(b_t, v): regret of the played bids against fixed ``b_prime``."""
    curves = delta_curves(trace, history, grid=np.array([float(b_prime)]))
    return float(v * curves.delta_eq[0] - curves.delta_ecpm[0])


# ============================================
# RATIONALIZABLE SET
# ============================================

def lower_hull(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the lower convex hull of the points (x, y), left to right."""
    order = np.lexsort((y, x))
    hull: list[tuple[float, float]] = []
    for px, py in zip(x[order].tolist(), y[order].tolist()):
        if hull and hull[-1][0] == px:
            continue  # same x, larger y
        while len(hull) >= 2:
            (ax, ay), (bx, by) = hull[-2], hull[-1]
            if (bx - ax) * (py - ay) - (by - ay) * (px - ax) <= HULL_TOL * max(1.0, abs(px - ax)):
                hull.pop()
            else:
                break
        hull.append((px, py))
    vertices = np.asarray(hull, dtype=float).reshape(-1, 2)
    return vertices[:, 0], vertices[:, 1]


@dataclass(frozen=True)
class RationalizableSet:
    """
    Half-planes v·dQ(b') - dC(b') <= eps over the grid, and the lowest point of their envelope.

    ``budget_constrained`` marks agents for whom no comparison bid gains
    impressions: every half-plane passes through or below the origin and
    the set gives no upper bound on the value. Their ``v_star`` is the top
    of the value range, not an estimate.
    """

    curves: DeltaCurves
    v_star: float
    eps_star: float
    budget_constrained: bool
    breakpoints: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def regret_at(self, v: float | np.ndarray) -> float | np.ndarray:
        return self.curves.regret_at(v)

    def regret_curve(self, v_values: Sequence[float] | np.ndarray) -> np.ndarray:
        """eps(v) sampled at ``v_values``, for plotting the envelope."""
        return np.asarray(self.regret_at(np.asarray(v_values, dtype=float)), dtype=float)

    def contains(self, v: float, eps: float, tol: float = 1e-12) -> bool:
        return bool(eps >= self.regret_at(v) - tol)

    @property
    def relative_regret(self) -> Optional[float]:
        return self.eps_star / self.v_star if self.v_star > 0 else None


def envelope_breakpoints(curves: DeltaCurves) -> np.ndarray:
    """Values v at which the maximizing half-plane changes: slopes of the lower hull of (dQ, dC)."""
    hx, hy = lower_hull(curves.delta_eq, curves.delta_ecpm)
    if hx.size < 2:
        return np.zeros(0)
    return np.diff(hy) / np.diff(hx)


def minimize_regret(curves: DeltaCurves, v_max: float) -> tuple[float, float, bool, np.ndarray]:
    """
    (v*, eps*, budget_constrained, breakpoints) for eps(v) over v >= 0.

    The minimizers form an interval with candidate ends; v* is its middle.
    """
    breakpoints = envelope_breakpoints(curves)
    if float(np.max(curves.delta_eq)) <= HULL_TOL:
        return v_max, curves.regret_at(v_max), True, breakpoints

    candidates = np.concatenate(([0.0], np.sort(breakpoints[breakpoints > 0.0])))
    values = curves.regret_at(candidates)
    best = float(values.min())
    ties = np.nonzero(values <= best + HULL_TOL * max(1.0, abs(best)))[0]
    v_star = 0.5 * (float(candidates[ties[0]]) + float(candidates[ties[-1]]))
    return v_star, curves.regret_at(v_star), False, breakpoints


def build_rationalizable_set(
    trace: BidTrace,
    history: Sequence[MarketDay] | Mapping[dt.date, MarketDay],
    config: Optional[RegretGridConfig] = None,
    extra_bids: Iterable[float] = (),
    grid: Optional[np.ndarray] = None,
) -> RationalizableSet:
    """
    Rationalizable set of an agent's trace and its minimum-regret point.

    eps(v) is convex and piecewise linear, so its minimizers over v >= 0 form
    an interval whose ends are v = 0 or envelope breakpoints.
    """
    config = config or RegretGridConfig()
    days = align_history(trace, history)
    if grid is None:
        grid = candidate_grid(days, trace.agent_id, extra_bids, config)
    curves = _day_curves(days, trace.agent_id, grid, [r.bid for r, _ in days])
    v_max = config.value_grid_multiple * float(grid.max())
    v_star, eps_star, constrained, breakpoints = minimize_regret(curves, v_max)
    return RationalizableSet(curves, v_star, eps_star, constrained, breakpoints)


def support_function(curves: DeltaCurves, u: Sequence[float] | np.ndarray) -> float:
    """
    Support function h(u) = sup <(v, eps), u> of the rationalizable set.

    Only directions pointing down in eps are finite. Writing x = u1/|u2|,
    h(u) = |u2| · min over z >= x of L(z), where L is the lower convex
    envelope of the points (dQ(b'), dC(b')). It is +inf once x passes
    max dQ; below the envelope's lowest point the supremum sits at v = 0.

    Raises:
        InvalidInputError: ``u`` is not a unit vector in the plane.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (2,) or not np.all(np.isfinite(u)) or abs(float(np.hypot(*u)) - 1.0) > UNIT_NORM_TOL:
        raise InvalidInputError(f"direction must be a unit vector, got {u.tolist()}")
    u1, u2 = float(u[0]), float(u[1])
    if u2 >= 0.0:
        return math.inf

    x = u1 / abs(u2)
    hx, hy = lower_hull(curves.delta_eq, curves.delta_ecpm)
    span = HULL_TOL * max(1.0, float(np.max(np.abs(hx))))
    if x > hx[-1] + span:
        return math.inf
    lowest = float(hx[int(np.argmin(hy))])
    x = min(max(x, lowest), float(hx[-1]))
    return abs(u2) * float(np.interp(x, hx, hy))


# ============================================
# RECOMMENDATION COUNTERFACTUAL
# ============================================

class RegretReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: str
    v_star: float
    eps_star: float
    relative_regret: Optional[float] = None
    per_impression_regret: float
    eps_reco: Optional[float] = None
    classification: Optional[Classification] = None
    budget_constrained: bool = False
    days: int

    @property
    def regret_difference(self) -> Optional[float]:
        return None if self.eps_reco is None else self.eps_star - self.eps_reco


def classify(eps_own: float, eps_reco: float, delta: Optional[float] = None) -> Classification:
    delta = settings.classification_delta if delta is None else delta
    gap = eps_own - eps_reco
    if gap > delta:
        return Classification.WORSE
    if gap < -delta:
        return Classification.BETTER
    return Classification.EQUAL


def _per_impression(eps_star: float, curves: DeltaCurves) -> float:
    if curves.won_impressions <= 0.0:
        return math.nan
    return eps_star * curves.days / curves.won_impressions


def infer_agent(
    trace: BidTrace,
    history: Sequence[MarketDay] | Mapping[dt.date, MarketDay],
    config: Optional[RegretGridConfig] = None,
) -> RegretReport:
    rset = build_rationalizable_set(trace, history, config)
    return RegretReport(
        agent_id=trace.agent_id,
        v_star=rset.v_star,
        eps_star=rset.eps_star,
        relative_regret=rset.relative_regret,
        per_impression_regret=_per_impression(rset.eps_star, rset.curves),
        budget_constrained=rset.budget_constrained,
        days=rset.curves.days,
    )


def counterfactual_day(day: MarketDay, agent_id: str, bid: float, played: float) -> MarketDay:
    """The day re-solved with ``agent_id`` bidding ``bid``; unchanged when it equals the played bid."""
    if bid == played:
        return day
    market = day.market.with_bid(agent_id, bid)
    solution = solve_pacing_with_retry(market)
    return MarketDay(day.date, market, solution.pi_by_id(), day.volume)


def compare_with_recommendation(
    trace: BidTrace,
    history: Sequence[MarketDay] | Mapping[dt.date, MarketDay],
    delta: Optional[float] = None,
    config: Optional[RegretGridConfig] = None,
) -> RegretReport:
    """
    Own regret at v* against the regret of always bidding the recommendation.

    The counterfactual replaces each day's bid with that day's recommended
    bid and re-solves pacing for the whole market. Both sequences are scored
    on one grid at the v* of the agent's own play.

    Raises:
        InvalidInputError: an active day has no recommended bid.
    """
    days = align_history(trace, history)
    missing = [r.date for r, _ in days if r.recommended_bid is None]
    if missing:
        raise InvalidInputError(
            f"trace {trace.agent_id!r} lacks recommended bids on {len(missing)} day(s), first {missing[0]}"
        )
    recommended = [float(r.recommended_bid) for r, _ in days]

    config = config or RegretGridConfig()
    grid = candidate_grid(days, trace.agent_id, recommended, config)
    own = build_rationalizable_set(trace, history, config, grid=grid)

    counter_days = [
        (r, counterfactual_day(day, trace.agent_id, rec, r.bid)) for (r, day), rec in zip(days, recommended)
    ]
    reco_curves = _day_curves(counter_days, trace.agent_id, grid, recommended)
    eps_reco = reco_curves.regret_at(own.v_star)

    return RegretReport(
        agent_id=trace.agent_id,
        v_star=own.v_star,
        eps_star=own.eps_star,
        relative_regret=own.relative_regret,
        per_impression_regret=_per_impression(own.eps_star, own.curves),
        eps_reco=eps_reco,
        classification=classify(own.eps_star, eps_reco, delta),
        budget_constrained=own.budget_constrained,
        days=own.curves.days,
    )


def regret_difference_histogram(
    reports: Iterable[RegretReport], bins: int | Sequence[float] = 20
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram (counts, edges) of eps_own - eps_reco over the reports carrying both."""
    diffs = np.array([r.regret_difference for r in reports if r.regret_difference is not None], dtype=float)
    return np.histogram(diffs, bins=bins)


# ============================================
# ADHERENCE
# ============================================

class AdherenceCurve(BaseModel):
    """Fraction of bid-change events matching the recommendation, by tenure month."""

    model_config = ConfigDict(frozen=True)

    months: tuple[int, ...]
    overall: tuple[float, ...]
    agents: tuple[int, ...]
    by_cluster: dict[int, tuple[float, ...]] = {}

    def rows(self) -> list[dict]:
        rows = [
            {"cluster": "all", "month": m, "fraction": f, "agents": n}
            for m, f, n in zip(self.months, self.overall, self.agents)
        ]
        for label, fractions in sorted(self.by_cluster.items()):
            rows.extend(
                {"cluster": str(label), "month": m, "fraction": f, "agents": None}
                for m, f in zip(self.months, fractions)
                if not math.isnan(f)
            )
        return rows


def _agent_month_fractions(trace: BidTrace, month_days: int) -> dict[int, float]:
    hits: dict[int, list[bool]] = {}
    for record in trace.bid_change_events():
        if record.recommended_bid is None:
            continue
        month = trace.tenure_month(record.date, month_days)
        hits.setdefault(month, []).append(abs(record.bid - record.recommended_bid) <= MATCH_TOL)
    return {month: float(np.mean(flags)) for month, flags in hits.items()}


def adherence_curve(
    traces: Iterable[BidTrace],
    clusters: Optional[Mapping[str, int]] = None,
    month_days: Optional[int] = None,
) -> AdherenceCurve:
    """
    Per agent, the share of bid-change events (the first active day counts
    as one) whose new bid equals that day's recommendation within 1e-9,
    bucketed by months since the agent's first active day and averaged
    over the agents with events in the month.
    """
    month_days = settings.adherence_month_days if month_days is None else month_days
    per_agent = {t.agent_id: _agent_month_fractions(t, month_days) for t in traces}
    months = sorted({m for fractions in per_agent.values() for m in fractions})

    def _average(agent_ids: Iterable[str]) -> tuple[tuple[float, ...], tuple[int, ...]]:
        means, counts = [], []
        for month in months:
            values = [per_agent[a][month] for a in agent_ids if month in per_agent[a]]
            means.append(float(np.mean(values)) if values else math.nan)
            counts.append(len(values))
        return tuple(means), tuple(counts)

    overall, counts = _average(per_agent)
    by_cluster: dict[int, tuple[float, ...]] = {}
    if clusters:
        for label in sorted(set(clusters.values())):
            members = [a for a, c in clusters.items() if c == label and a in per_agent]
            by_cluster[label] = _average(members)[0]
    return AdherenceCurve(months=tuple(months), overall=overall, agents=counts, by_cluster=by_cluster)
