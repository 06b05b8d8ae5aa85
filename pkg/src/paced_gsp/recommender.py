"""
Bid recommendation.

A bidder with a per-mille budget wants the bid that maximizes expected
impressions. Along a grid of candidate bids (every opponent bid plus and
minus epsilon, the reserve, the budget) the bidder's conditional share eQ
and cost eCPM are step functions; budget smoothing turns them into

    Prob(b, Budget) = eQ(b)                     if eCPM(b) <= Budget
                      Budget * eQ(b) / eCPM(b)  otherwise

Goal mode inverts the question: find the cheapest bid reaching an
impression target, and the budget that pays for it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Collection, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from paced_gsp.config.settings import settings
from paced_gsp.engine import ProbeField, outcomes_dp
from paced_gsp.errors import InfeasibleGoalsError, InvalidInputError
from paced_gsp.market import Bidder, MarketSnapshot, canonical_sort
from paced_gsp.pacing import solve_pacing, solve_pacing_with_retry

logger = logging.getLogger(__name__)

Coupling = Literal["full", "frozen"]

# Prob and eQ comparisons treat values this close as equal
VALUE_TOL = 1e-12


class CornerCase(str, Enum):
    NONE = "none"
    TOP_BIDDER = "top-bidder"
    BOTTOM_BIDDER = "bottom-bidder"


# ============================================
# TYPES
# ============================================

class Recommendation(BaseModel):
    model_config = ConfigDict(frozen=True)

    bid: float
    expected_share: float
    expected_spend: float
    corner_case: CornerCase = CornerCase.NONE
    budget: float

    def to_json_dict(self) -> dict:
        return {
            "bid": self.bid,
            "expected_share": self.expected_share,
            "expected_spend": self.expected_spend,
            "corner_case": self.corner_case.value,
        }


class GoalRequest(BaseModel):
    """Impression goal over a projected inventory of impression opportunities."""

    model_config = ConfigDict(frozen=True)

    goal: float = Field(ge=0.0, allow_inf_nan=False)
    inventory: float = Field(gt=0.0, allow_inf_nan=False)

    @property
    def target_share(self) -> float:
        return self.goal / self.inventory

    def scaled(self, tau: float) -> GoalRequest:
        return GoalRequest(goal=self.goal * tau, inventory=self.inventory * tau)


class GoalRecommendation(BaseModel):
    model_config = ConfigDict(frozen=True)

    bid: float
    budget_per_mille: float
    monthly_budget: float
    expected_share: float
    corner_case: CornerCase = CornerCase.NONE

    def to_json_dict(self) -> dict:
        return {
            "bid": self.bid,
            "budget_per_mille": self.budget_per_mille,
            "monthly_budget": self.monthly_budget,
            "expected_share": self.expected_share,
            "corner_case": self.corner_case.value,
        }


class SimultaneousRecommendation(BaseModel):
    model_config = ConfigDict(frozen=True)

    recommendations: dict[str, GoalRecommendation]
    sweeps: int
    converged: bool

    @property
    def bids(self) -> dict[str, float]:
        return {k: rec.bid for k, rec in self.recommendations.items()}


class IntegrityCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    passed: bool
    max_violation: float


class IntegrityReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    checks: tuple[IntegrityCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


@dataclass(frozen=True)
class EcpmCurve:
    """The querying bidder's (eQ, eCPM) at each grid bid, with Prob for ``budget``."""

    bids: np.ndarray
    eq: np.ndarray
    ecpm: np.ndarray
    budget: float = math.inf

    @property
    def prob(self) -> np.ndarray:
        return paced_share(self.eq, self.ecpm, self.budget)

    @property
    def spend(self) -> np.ndarray:
        return np.minimum(self.ecpm, self.budget)

    def is_monotone(self, tol: float = 1e-12) -> bool:
        return bool(
            np.all(np.diff(self.bids) > 0)
            and np.all(np.diff(self.eq) >= -tol)
            and np.all(np.diff(self.ecpm) >= -tol)
        )


def paced_share(eq: np.ndarray, ecpm: np.ndarray, budget: float) -> np.ndarray:
    """Prob(b, Budget): the share left after smoothing the budget over eCPM."""
    eq = np.asarray(eq, dtype=float)
    ecpm = np.asarray(ecpm, dtype=float)
    over = ecpm > budget
    scaled = np.divide(budget * eq, ecpm, out=np.zeros_like(eq), where=over)
    return np.where(over, scaled, eq)


# ============================================
# GRID
# ============================================

def grid_epsilon(opponent_bids: Iterable[float], absolute: Optional[float] = None, relative: Optional[float] = None) -> float:
    """max(abs, rel·max bid), kept under a quarter of the smallest gap between distinct opponent bids."""
    absolute = settings.grid_epsilon_abs if absolute is None else absolute
    relative = settings.grid_epsilon_rel if relative is None else relative
    distinct = np.unique(np.asarray(list(opponent_bids), dtype=float))
    eps = max(absolute, relative * (float(distinct.max()) if distinct.size else 0.0))
    if distinct.size > 1:
        eps = min(eps, float(np.min(np.diff(distinct))) / 4.0)
    return eps


def bid_grid(
    opponent_bids: Iterable[float],
    reserve: float,
    budget: Optional[float] = None,
    eps: Optional[float] = None,
) -> np.ndarray:
    """Strictly increasing candidate bids at or above the reserve."""
    opponent_bids = [b for b in opponent_bids if b >= reserve]
    eps = grid_epsilon(opponent_bids) if eps is None else eps
    points = [reserve]
    for b in opponent_bids:
        points.extend((b - eps, b + eps))
    if budget is not None and math.isfinite(budget):
        points.append(budget)
    grid = np.unique(np.asarray(points, dtype=float))
    return grid[grid >= reserve]


@dataclass(frozen=True)
class _Query:
    """The querying bidder and its opponents."""

    bidder_id: str
    priority: int
    opponents: MarketSnapshot
    opponent_bids: tuple[float, ...]

    @classmethod
    def build(cls, market: MarketSnapshot, bidder_id: Optional[str]) -> _Query:
        if bidder_id is not None and market.has(bidder_id):
            priority = market.get(bidder_id).priority
            opponents = market.without(bidder_id)
        else:
            bidder_id = bidder_id or "__query__"
            priority = market.next_priority()
            opponents = market
        active = canonical_sort(opponents)
        return cls(bidder_id, priority, opponents, tuple(b.bid for b in active))

    @property
    def top_opponent_bid(self) -> float:
        return max(self.opponent_bids, default=0.0)

    def bidder(self, bid: float, budget: float) -> Bidder:
        return Bidder(id=self.bidder_id, bid=bid, budget_per_mille=budget, priority=self.priority)


def build_curve(
    market: MarketSnapshot,
    pi_of_opponents: Mapping[str, float] | Sequence[float] | np.ndarray,
    querying_bidder_budget: Optional[float] = None,
    priority: Optional[int] = None,
    eps: Optional[float] = None,
) -> EcpmCurve:
    """
    Curve of a new bidder probing ``market`` with the opponents' pi held fixed.

    ``pi_of_opponents`` maps opponent ids to pi, or lists pi in canonical
    order. The prober is unfiltered while probing and loses every tie
    unless ``priority`` says otherwise.
    """
    active = canonical_sort(market)
    if isinstance(pi_of_opponents, Mapping):
        pi_map = dict(pi_of_opponents)
    else:
        values = np.asarray(pi_of_opponents, dtype=float)
        if values.shape != (len(active),):
            raise InvalidInputError(f"expected {len(active)} opponent probabilities, got {values.shape}")
        pi_map = {b.id: float(p) for b, p in zip(active, values)}

    budget = math.inf if querying_bidder_budget is None else querying_bidder_budget
    grid = bid_grid([b.bid for b in active], market.reserve, querying_bidder_budget, eps)
    field = ProbeField(active, pi_map, market.reserve, market.weights)
    eq, ecpm = field.evaluate(grid, market.next_priority() if priority is None else priority)
    return EcpmCurve(grid, eq, ecpm, budget)


def _evaluate(
    query: _Query,
    market: MarketSnapshot,
    probes: np.ndarray,
    budget: float,
    coupling: Coupling,
    pinned: Collection[str],
    pin_query: bool,
    opponent_pi: Optional[Mapping[str, float]],
) -> tuple[np.ndarray, np.ndarray]:
    """(eQ, eCPM) of the querying bidder at each probe under the chosen coupling."""
    opponents = query.opponents
    if coupling == "frozen":
        if opponent_pi is None:
            # opponents' pi from one solve, with the prober at its current bid when it has one
            solved_market = market if market.has(query.bidder_id) else opponents
            opponent_pi = solve_pacing_with_retry(solved_market, pinned=_pins(query, pinned, pin_query)).pi_by_id()
        field = ProbeField(canonical_sort(opponents), opponent_pi, opponents.reserve, opponents.weights)
        return field.evaluate(probes, query.priority)

    eq = np.zeros(probes.size)
    ecpm = np.zeros(probes.size)
    pins = _pins(query, pinned, pin_query)
    for k, bid in enumerate(probes.tolist()):
        joint = opponents.with_bidder(query.bidder(bid, budget))
        solution = solve_pacing_with_retry(joint, pinned=pins)
        table = solution.outcomes
        if query.bidder_id in table.bidder_ids:
            row = table.index(query.bidder_id)
            eq[k], ecpm[k] = table.eq[row], table.ecpm[row]
    return eq, ecpm


def _pins(query: _Query, pinned: Collection[str], pin_query: bool) -> frozenset[str]:
    pins = set(pinned)
    if pin_query:
        pins.add(query.bidder_id)
    return frozenset(pins)


# ============================================
# BUDGET MODE
# ============================================

def recommend_bid(
    market: MarketSnapshot,
    budget: float,
    bidder_id: Optional[str] = None,
    coupling: Optional[Coupling] = None,
    opponent_pi: Optional[Mapping[str, float]] = None,
    eps: Optional[float] = None,
) -> Recommendation:
    """
    Bid maximizing Prob(b, budget) over the candidate grid.

    ``market`` holds the opponents; when ``bidder_id`` names a bidder in it,
    that bidder is the one asking and keeps its priority. Equal Prob across
    different outcome levels goes to the lower level; within one level
    (same eQ and eCPM) the bid is the level's upper grid point, where the
    eCPM curve meets the budget line.

    Corner cases: top position affordable and budget at least every opponent
    bid gives bid = max(budget, top opponent bid + eps); no positive Prob
    anywhere gives the reserve.
    """
    if not budget >= 0 or math.isnan(budget):
        raise InvalidInputError(f"budget must be nonnegative, got {budget}")
    coupling = settings.recommend_coupling if coupling is None else coupling

    query = _Query.build(market, bidder_id)
    eps = grid_epsilon(query.opponent_bids) if eps is None else eps
    grid = bid_grid(query.opponent_bids, market.reserve, budget, eps)
    eq, ecpm = _evaluate(query, market, grid, budget, coupling, (), False, opponent_pi)
    prob = paced_share(eq, ecpm, budget)

    def _at(bid: float, corner: CornerCase) -> Recommendation:
        share, cost = _evaluate(query, market, np.array([bid]), budget, coupling, (), False, opponent_pi)
        return Recommendation(
            bid=float(bid),
            expected_share=float(paced_share(share, cost, budget)[0]),
            expected_spend=float(min(cost[0], budget)),
            corner_case=corner,
            budget=budget,
        )

    best_value = float(prob.max())
    if best_value <= 0.0:
        return _at(market.reserve, CornerCase.BOTTOM_BIDDER)

    best = int(np.nonzero(prob >= best_value - VALUE_TOL)[0][0])
    while (
        best + 1 < grid.size
        and abs(eq[best + 1] - eq[best]) <= VALUE_TOL
        and abs(ecpm[best + 1] - ecpm[best]) <= VALUE_TOL * max(1.0, abs(ecpm[best]))
    ):
        best += 1

    top = query.top_opponent_bid
    on_top = not query.opponent_bids or grid[best] > top
    if on_top and budget >= ecpm[best] and budget >= top:
        return _at(max(budget, top + eps), CornerCase.TOP_BIDDER)

    return Recommendation(
        bid=float(grid[best]),
        expected_share=float(prob[best]),
        expected_spend=float(min(ecpm[best], budget)),
        corner_case=CornerCase.NONE,
        budget=budget,
    )


# ============================================
# GOAL MODE
# ============================================

def recommend_for_goal(
    market: MarketSnapshot,
    goal: GoalRequest,
    bidder_id: Optional[str] = None,
    coupling: Optional[Coupling] = None,
    pinned: Collection[str] = (),
    opponent_pi: Optional[Mapping[str, float]] = None,
    eps: Optional[float] = None,
    levels: Optional[Iterable[float]] = None,
) -> GoalRecommendation:
    """
    Cheapest grid bid whose eQ reaches goal/inventory, and the budget paying for it.

    The asking bidder is held unfiltered. When the target is out of reach
    the top grid bid is returned with budget equal to the bid; when even the
    bottom of the grid overshoots, the bottom bid is returned with the
    budget scaled down to target·eCPM/eQ.

    ``levels`` are the bids that cut the candidate grid, every opponent bid
    by default.
    """
    if goal.goal > goal.inventory:
        raise InvalidInputError(
            f"goal {goal.goal} exceeds inventory {goal.inventory}; a share above 1 is unreachable"
        )
    coupling = settings.recommend_coupling if coupling is None else coupling
    target = goal.target_share

    query = _Query.build(market, bidder_id)
    levels = query.opponent_bids if levels is None else tuple(levels)
    eps = grid_epsilon(levels) if eps is None else eps
    grid = bid_grid(levels, market.reserve, None, eps)
    eq, ecpm = _evaluate(query, market, grid, math.inf, coupling, pinned, True, opponent_pi)

    if eq.max() < target - VALUE_TOL:
        k, corner = grid.size - 1, CornerCase.TOP_BIDDER
        budget = float(grid[k])
        share = float(eq[k])
    elif eq.min() > target + VALUE_TOL:
        k, corner = 0, CornerCase.BOTTOM_BIDDER
        budget = float(target * ecpm[0] / eq[0])
        share = target
    else:
        k = int(np.nonzero(eq >= target - VALUE_TOL)[0][0])
        corner = CornerCase.NONE
        budget = float(ecpm[k])
        share = float(eq[k])

    return GoalRecommendation(
        bid=float(grid[k]),
        budget_per_mille=budget,
        monthly_budget=budget * goal.inventory / 1000.0,
        expected_share=share,
        corner_case=corner,
    )


def recommend_simultaneous(
    market: MarketSnapshot,
    goals: Mapping[str, GoalRequest],
    tol: float = 1e-9,
    max_sweeps: Optional[int] = None,
    coupling: Optional[Coupling] = None,
) -> SimultaneousRecommendation:
    """
    Goal recommendations for several bidders at once.

    Block fixed-point sweeps: each member in id order is re-recommended
    against the others' current bids, all members held unfiltered. The
    candidate grid is cut at non-member bids only, so members move between
    those levels and settle ties among themselves by priority. Stops when no
    bid moves by more than ``tol``; the returned shares and budgets are
    re-evaluated at the final joint bids.

    Raises:
        InvalidInputError: empty goal set or a member missing from the market.
        InfeasibleGoalsError: target shares summing above 1.
    """
    if not goals:
        raise InvalidInputError("simultaneous recommendation needs at least one goal")
    members = sorted(goals)
    for member in members:
        if not market.has(member):
            raise InvalidInputError(f"goal member {member!r} is not in the market")
    total_share = math.fsum(goals[m].target_share for m in members)
    if total_share > 1.0 + VALUE_TOL:
        raise InfeasibleGoalsError(f"joint target share {total_share:.6g} exceeds 1")

    max_sweeps = settings.simultaneous_max_sweeps if max_sweeps is None else max_sweeps
    levels = tuple(b.bid for b in canonical_sort(market) if b.id not in goals)
    current = market
    recommendations: dict[str, GoalRecommendation] = {}
    converged = False
    sweeps = 0
    while sweeps < max_sweeps and not converged:
        sweeps += 1
        moved = 0.0
        for member in members:
            others = [m for m in members if m != member]
            rec = recommend_for_goal(
                current, goals[member], bidder_id=member, coupling=coupling, pinned=others, levels=levels
            )
            moved = max(moved, abs(rec.bid - current.get(member).bid))
            current = current.with_bid(member, rec.bid)
            recommendations[member] = rec
        converged = moved <= tol
        logger.debug("simultaneous sweep", extra={"sweep": sweeps, "moved": moved})

    if not converged:
        logger.warning(f"Simultaneous recommendation did not settle after {sweeps} sweeps")
    recommendations = _at_joint_bids(current, goals, recommendations)
    return SimultaneousRecommendation(recommendations=recommendations, sweeps=sweeps, converged=converged)


def _at_joint_bids(
    market: MarketSnapshot,
    goals: Mapping[str, GoalRequest],
    recommendations: Mapping[str, GoalRecommendation],
) -> dict[str, GoalRecommendation]:
    """Each member's share and budget with every member at its final bid."""
    table = solve_pacing_with_retry(market, pinned=frozenset(goals)).outcomes
    settled = {}
    for member, rec in recommendations.items():
        goal = goals[member]
        row = table.index(member) if member in table.bidder_ids else None
        eq = float(table.eq[row]) if row is not None else 0.0
        ecpm = float(table.ecpm[row]) if row is not None else 0.0
        if rec.corner_case is CornerCase.BOTTOM_BIDDER and eq > 0.0:
            share, budget = goal.target_share, goal.target_share * ecpm / eq
        elif rec.corner_case is CornerCase.TOP_BIDDER:
            share, budget = eq, rec.budget_per_mille
        else:
            share, budget = eq, ecpm
        if share < goal.target_share - VALUE_TOL:
            logger.warning(
                f"Member {member!r} reaches share {share:.6g} at the joint bids, short of {goal.target_share:.6g}"
            )
        settled[member] = rec.model_copy(
            update={
                "expected_share": share,
                "budget_per_mille": budget,
                "monthly_budget": budget * goal.inventory / 1000.0,
            }
        )
    return settled


# ============================================
# INTEGRITY TESTS
# ============================================

def check_ratio_monotonicity(curves: Iterable[EcpmCurve], tol: float = 1e-9) -> IntegrityCheck:
    """eQ/eCPM must not increase along any curve (points with zero eCPM are skipped)."""
    worst = 0.0
    for curve in curves:
        mask = curve.ecpm > 0.0
        ratio = curve.eq[mask] / curve.ecpm[mask]
        if ratio.size > 1:
            worst = max(worst, float(np.max(np.diff(ratio))))
    return IntegrityCheck(name="ratio_monotonicity", passed=worst <= tol, max_violation=worst)


def integrity_suite(
    market: MarketSnapshot,
    taus: Sequence[float] = (0.5, 2.0, 10.0),
    tol: float = 1e-9,
    pi: Optional[Sequence[float] | np.ndarray] = None,
    inventory: float = 1_000_000.0,
) -> IntegrityReport:
    """
    Four consistency checks of the recommendation tool, filtering probabilities held fixed.

    1. scaling bids and reserve by tau leaves every eQ unchanged;
    2. the same scaling multiplies every eCPM by tau (violation relative to max(1, tau·eCPM));
    3. scaling inventory and goals by tau leaves goal-mode bids and budgets unchanged;
    4. eQ/eCPM is weakly decreasing along every bidder's curve.
    """
    if pi is None:
        pi = solve_pacing(market).pi
    base = outcomes_dp(market, pi)
    pi_by_id = dict(zip(base.bidder_ids, base.pi.tolist()))

    share_violation = 0.0
    spend_violation = 0.0
    for tau in taus:
        scaled = outcomes_dp(market.scaled(tau), base.pi)
        if scaled.eq.size:
            share_violation = max(share_violation, float(np.max(np.abs(scaled.eq - base.eq))))
            expected = tau * base.ecpm
            relative = np.abs(scaled.ecpm - expected) / np.maximum(1.0, np.abs(expected))
            spend_violation = max(spend_violation, float(np.max(relative)))

    goal_violation = 0.0
    curves = []
    for bidder_id, share in zip(base.bidder_ids, base.unconditional_share.tolist()):
        opponent_pi = {k: v for k, v in pi_by_id.items() if k != bidder_id}
        request = GoalRequest(goal=share * inventory, inventory=inventory)
        reference = recommend_for_goal(market, request, bidder_id, coupling="frozen", opponent_pi=opponent_pi)
        for tau in taus:
            moved = recommend_for_goal(
                market, request.scaled(tau), bidder_id, coupling="frozen", opponent_pi=opponent_pi
            )
            goal_violation = max(
                goal_violation,
                abs(moved.bid - reference.bid),
                abs(moved.budget_per_mille - reference.budget_per_mille),
            )

        bidder = market.get(bidder_id)
        curves.append(
            build_curve(market.without(bidder_id), opponent_pi, bidder.budget_per_mille, bidder.priority)
        )

    report = IntegrityReport(
        checks=(
            IntegrityCheck(name="share_scale_invariance", passed=share_violation <= tol, max_violation=share_violation),
            IntegrityCheck(name="spend_scale_covariance", passed=spend_violation <= tol, max_violation=spend_violation),
            IntegrityCheck(name="goal_scale_invariance", passed=goal_violation <= tol, max_violation=goal_violation),
            check_ratio_monotonicity(curves, tol),
        )
    )
    logger.info(
        f"Integrity suite {'passed' if report.passed else 'FAILED'}",
        extra={"violations": {c.name: c.max_violation for c in report.checks}},
    )
    return report
