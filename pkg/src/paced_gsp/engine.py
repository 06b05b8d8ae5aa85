"""
Expected outcomes of the budget-smoothed GSP auction.

Every bidder i is eligible for an impression with probability pi_i. The
eligible bidders are ranked by bid; rank r earns impression share gamma[r]
and pays the next eligible bid below it, or the reserve when nobody is left.
All outcomes here are conditional on the bidder itself being eligible:

    eQ_i   = sum_r gamma[r] * P(exactly r eligible bidders rank above i)
    eCPM_i = eQ_i * CPM_i,  CPM_i = E[price | i shown]

Two engines compute the same numbers. ``outcomes_dp`` is the linear-time
sweep; ``outcomes_oracle`` enumerates every filter configuration and exists
to check the sweep. ``sample_impression`` and ``monte_carlo_outcomes`` draw
single page views for a statistical cross-check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from paced_gsp.config.settings import settings
from paced_gsp.errors import InvalidInputError, OracleCapExceededError
from paced_gsp.market import (
    N_RANKS,
    SLOTS_PER_PAGE,
    Bidder,
    MarketSnapshot,
    PositionWeights,
    canonical_key,
    canonical_sort,
)

logger = logging.getLogger(__name__)

# pi at or above 1 - PI_ONE_GUARD takes the direct branch
PI_ONE_GUARD = 1e-12
# |1 - pi| below this is recomputed directly rather than rolled
ROLLING_HYGIENE = 1e-9
NEGATIVE_CPM_GUARD = 1e-9
# rounding error in a rolled CPM grows by 1/(1 - pi) per step; re-anchor past this
MAX_ROLLING_GAIN = 1e3
# a direct scan stops once the chance of reaching further bidders drops below this
SCAN_TRUNCATION = 1e-18

ORACLE_CHUNK = 1 << 15
MC_BATCH = 100_000

SeedLike = Union[int, np.random.Generator, None]


# ============================================
# RESULT TYPES
# ============================================

@dataclass(frozen=True)
class OutcomeTable:
    """Per-bidder outcomes in canonical order."""

    bidder_ids: tuple[str, ...]
    bids: np.ndarray
    pi: np.ndarray
    eq: np.ndarray
    ecpm: np.ndarray

    def __len__(self) -> int:
        return len(self.bidder_ids)

    @property
    def unconditional_share(self) -> np.ndarray:
        return self.pi * self.eq

    @property
    def unconditional_spend(self) -> np.ndarray:
        return self.pi * self.ecpm

    def index(self, bidder_id: str) -> int:
        try:
            return self.bidder_ids.index(bidder_id)
        except ValueError:
            raise InvalidInputError(f"bidder {bidder_id!r} is not active in this table") from None

    def to_records(self) -> list[dict]:
        share, spend = self.unconditional_share, self.unconditional_spend
        return [
            {
                "agent_id": bidder_id,
                "bid": float(self.bids[k]),
                "pi": float(self.pi[k]),
                "eq": float(self.eq[k]),
                "ecpm": float(self.ecpm[k]),
                "unconditional_share": float(share[k]),
                "unconditional_spend": float(spend[k]),
            }
            for k, bidder_id in enumerate(self.bidder_ids)
        ]

    @classmethod
    def empty(cls) -> OutcomeTable:
        nothing = np.zeros(0)
        return cls((), nothing, nothing, nothing, nothing)


@dataclass(frozen=True)
class ImpressionDraw:
    """One simulated page view."""

    bidder_ids: tuple[str, ...]
    eligible: np.ndarray
    rank: np.ndarray  # -1 when filtered
    shown: np.ndarray
    price: np.ndarray  # price charged to shown bidders, 0 otherwise

    @property
    def spend(self) -> float:
        return float(self.price.sum())


@dataclass(frozen=True)
class MonteCarloEstimate:
    """Per-opportunity share and spend means with their standard errors."""

    bidder_ids: tuple[str, ...]
    n_draws: int
    share_mean: np.ndarray
    share_se: np.ndarray
    spend_mean: np.ndarray
    spend_se: np.ndarray


# ============================================
# VALIDATION HELPERS
# ============================================

def as_filter_vector(pi: Optional[Sequence[float] | np.ndarray], n: int) -> np.ndarray:
    """Validate a filtering-probability vector for ``n`` active bidders (None means all ones)."""
    if pi is None:
        return np.ones(n)
    vector = np.asarray(pi, dtype=float)
    if vector.shape != (n,):
        raise InvalidInputError(f"filter vector has shape {vector.shape}, expected ({n},)")
    if not np.all(np.isfinite(vector)) or np.any(vector < 0.0) or np.any(vector > 1.0):
        raise InvalidInputError("filter probabilities must lie in [0, 1]")
    return vector


def _check_sorted(bids: np.ndarray, reserve: float) -> None:
    if bids.size == 0:
        return
    if np.any(np.diff(bids) > 0.0):
        raise InvalidInputError("bids must be in canonical order (descending)")
    if bids[-1] < reserve:
        raise InvalidInputError("bids below the reserve must be dropped before the engine runs")


def _next_unfiltered_price(unfiltered: np.ndarray, bids: np.ndarray, reserve: float) -> np.ndarray:
    """For each row and bidder, the first unfiltered bid strictly below, else the reserve."""
    price = np.empty(unfiltered.shape)
    following = np.full(unfiltered.shape[0], float(reserve))
    for i in range(unfiltered.shape[1] - 1, -1, -1):
        price[:, i] = following
        following = np.where(unfiltered[:, i], bids[i], following)
    return price


# ============================================
# LINEAR-TIME SWEEP
# ============================================

def _direct_cpm(bids: list[float], pis: list[float], i: int, reserve: float) -> float:
    """Expected price of bidder i from scratch: sum_j b_j * q_ij plus the reserve tail."""
    survive = 1.0  # everyone strictly between i and j filtered
    price = 0.0
    for j in range(i + 1, len(bids)):
        pj = pis[j]
        price += survive * pj * bids[j]
        survive *= 1.0 - pj
        if survive <= SCAN_TRUNCATION:
            break
    return price + survive * reserve


def expected_outcomes(
    bids: Sequence[float] | np.ndarray,
    pi: Optional[Sequence[float] | np.ndarray],
    reserve: float,
    weights: PositionWeights = PositionWeights(),
) -> tuple[np.ndarray, np.ndarray]:
    """
    Conditional (eQ, eCPM) for bidders already in canonical order.

    The rank distribution p_{i,r} is pushed down the list one bidder at a
    time. The price expectation rolls forward with

        CPM_i = (CPM_{i-1} - pi_i * b_i) / (1 - pi_i)

    and is recomputed by a direct scan for the top bidder, when pi_i is 1
    (or within 1e-9 of it), when the roll goes negative, and when rounding
    amplified by the 1/(1 - pi) factors since the last direct value exceeds
    MAX_ROLLING_GAIN. Each direct scan stops at the next bidder with pi = 1
    or once the chance of getting further is negligible, so every bidder is
    scanned a bounded number of times and the sweep stays linear.

    Raises:
        InvalidInputError: unsorted bids, bids below reserve, bad pi.
    """
    bid_array = np.asarray(bids, dtype=float)
    n = bid_array.size
    pi_array = as_filter_vector(pi, n)
    _check_sorted(bid_array, reserve)

    g0, g1, g2, g3 = weights.gamma
    bl = bid_array.tolist()
    pl = pi_array.tolist()
    eq = [0.0] * n
    ecpm = [0.0] * n

    p0, p1, p2, p3 = 1.0, 0.0, 0.0, 0.0
    cpm = 0.0
    gain = 1.0
    for i in range(n):
        if i > 0:
            take = pl[i - 1]
            keep = 1.0 - take
            p3 = keep * p3 + take * p2
            p2 = keep * p2 + take * p1
            p1 = keep * p1 + take * p0
            p0 = keep * p0
        eq_i = g0 * p0 + g1 * p1 + g2 * p2 + g3 * p3

        pi_i = pl[i]
        direct = i == 0 or pi_i >= 1.0 - PI_ONE_GUARD or abs(1.0 - pi_i) < ROLLING_HYGIENE
        if not direct:
            gain /= 1.0 - pi_i
            rolled = (cpm - pi_i * bl[i]) / (1.0 - pi_i)
            direct = gain > MAX_ROLLING_GAIN or rolled < -NEGATIVE_CPM_GUARD
            cpm = rolled
        if direct:
            cpm = _direct_cpm(bl, pl, i, reserve)
            gain = 1.0

        eq[i] = eq_i
        ecpm[i] = eq_i * cpm

    return np.asarray(eq), np.asarray(ecpm)


def outcomes_dp(market: MarketSnapshot, pi: Optional[Sequence[float] | np.ndarray] = None) -> OutcomeTable:
    """Outcome table for the active bidders of ``market`` (pi aligned with canonical order)."""
    ordered = canonical_sort(market)
    bids = np.array([b.bid for b in ordered], dtype=float)
    pi_array = as_filter_vector(pi, len(ordered))
    eq, ecpm = expected_outcomes(bids, pi_array, market.reserve, market.weights)
    return OutcomeTable(tuple(b.id for b in ordered), bids, pi_array, eq, ecpm)


# ============================================
# ENUMERATION ORACLE
# ============================================

def outcomes_oracle(
    market: MarketSnapshot,
    pi: Optional[Sequence[float] | np.ndarray] = None,
    cap: Optional[int] = None,
) -> OutcomeTable:
    """
    Exact outcomes by enumerating all 2^I filter configurations.

    Each configuration N with bidder i unfiltered contributes
    prod_{j != i} pi_j^{n_j} (1 - pi_j)^{1 - n_j} times the rank reward and,
    for eCPM, the price (next unfiltered bid below, else reserve).

    Raises:
        OracleCapExceededError: more active bidders than ``cap`` (default from settings).
    """
    cap = settings.oracle_cap if cap is None else cap
    ordered = canonical_sort(market)
    n = len(ordered)
    if n > cap:
        raise OracleCapExceededError(n, cap)
    pi_array = as_filter_vector(pi, n)
    bids = np.array([b.bid for b in ordered], dtype=float)
    if n == 0:
        return OutcomeTable.empty()

    rewards = np.append(market.weights.as_array(), 0.0)
    bit = np.arange(n, dtype=np.int64)
    eq = np.zeros(n)
    ecpm = np.zeros(n)
    total = 1 << n

    for start in range(0, total, ORACLE_CHUNK):
        codes = np.arange(start, min(total, start + ORACLE_CHUNK), dtype=np.int64)
        unfiltered = ((codes[:, None] >> bit) & 1).astype(bool)
        factors = np.where(unfiltered, pi_array, 1.0 - pi_array)

        ones = np.ones((codes.size, 1))
        before = np.cumprod(np.hstack([ones, factors[:, :-1]]), axis=1)
        after = np.hstack([np.cumprod(factors[:, :0:-1], axis=1)[:, ::-1], ones])
        weight = np.where(unfiltered, before * after, 0.0)

        above = np.cumsum(unfiltered, axis=1) - unfiltered
        reward = rewards[np.minimum(above, N_RANKS)]
        price = _next_unfiltered_price(unfiltered, bids, market.reserve)

        eq += (weight * reward).sum(axis=0)
        ecpm += (weight * reward * price).sum(axis=0)

    return OutcomeTable(tuple(b.id for b in ordered), bids, pi_array, eq, ecpm)


# ============================================
# SAMPLING
# ============================================

def _drop_probabilities(weights: PositionWeights) -> np.ndarray:
    shown = SLOTS_PER_PAGE * weights.as_array()
    if np.any(shown > 1.0 + 1e-12):
        raise InvalidInputError("3·gamma[0] exceeds 1; the page cannot be sampled")
    drop = np.clip(1.0 - shown, 0.0, None)
    return drop / drop.sum()


def _draw_pages(
    rng: np.random.Generator,
    bids: np.ndarray,
    pi: np.ndarray,
    reserve: float,
    weights: PositionWeights,
    n_pages: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized page views: eligibility, rank, display and price matrices.

    With four or more survivors exactly three of the top four are shown and
    rank j is the one left out with probability 1 - 3·gamma[j]. With fewer
    survivors each is shown independently with probability 3·gamma[rank].
    Either way rank j is displayed with probability 3·gamma[j].
    """
    n = bids.size
    eligible = rng.random((n_pages, n)) < pi
    above = np.cumsum(eligible, axis=1) - eligible
    top = eligible & (above < N_RANKS)
    survivors = eligible.sum(axis=1)

    left_out = rng.choice(N_RANKS, size=n_pages, p=_drop_probabilities(weights))
    coins = rng.random((n_pages, n))
    shown_probability = SLOTS_PER_PAGE * np.append(weights.as_array(), 0.0)[np.minimum(above, N_RANKS)]

    shown_full = top & (above != left_out[:, None])
    shown_sparse = top & (coins < shown_probability)
    shown = np.where((survivors >= N_RANKS)[:, None], shown_full, shown_sparse)

    price = np.where(shown, _next_unfiltered_price(eligible, bids, reserve), 0.0)
    rank = np.where(eligible, above, -1)
    return eligible, rank, shown, price


def sample_impression(
    market: MarketSnapshot,
    pi: Optional[Sequence[float] | np.ndarray] = None,
    rng_seed: SeedLike = None,
) -> ImpressionDraw:
    """Draw one page view; deterministic for a fixed integer seed."""
    ordered = canonical_sort(market)
    bids = np.array([b.bid for b in ordered], dtype=float)
    pi_array = as_filter_vector(pi, len(ordered))
    rng = np.random.default_rng(rng_seed)
    eligible, rank, shown, price = _draw_pages(
        rng, bids, pi_array, market.reserve, market.weights, 1
    )
    return ImpressionDraw(tuple(b.id for b in ordered), eligible[0], rank[0], shown[0], price[0])


def monte_carlo_outcomes(
    market: MarketSnapshot,
    pi: Optional[Sequence[float] | np.ndarray] = None,
    n_draws: int = 1_000_000,
    rng_seed: SeedLike = None,
) -> MonteCarloEstimate:
    """
    Sampled unconditional share and spend per impression opportunity.

    A page holds three opportunities, so a shown bidder earns 1/3 of a page
    in share and price/3 in spend; the means estimate pi·eQ and pi·eCPM.
    """
    if n_draws <= 1:
        raise InvalidInputError("n_draws must be at least 2")
    ordered = canonical_sort(market)
    bids = np.array([b.bid for b in ordered], dtype=float)
    pi_array = as_filter_vector(pi, len(ordered))
    rng = np.random.default_rng(rng_seed)

    n = bids.size
    share_sum, share_sq = np.zeros(n), np.zeros(n)
    spend_sum, spend_sq = np.zeros(n), np.zeros(n)
    remaining = n_draws
    while remaining > 0:
        batch = min(MC_BATCH, remaining)
        _, _, shown, price = _draw_pages(rng, bids, pi_array, market.reserve, market.weights, batch)
        share = shown / SLOTS_PER_PAGE
        spend = price / SLOTS_PER_PAGE
        share_sum += share.sum(axis=0)
        share_sq += (share * share).sum(axis=0)
        spend_sum += spend.sum(axis=0)
        spend_sq += (spend * spend).sum(axis=0)
        remaining -= batch

    def _mean_se(total: np.ndarray, squares: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = total / n_draws
        variance = np.clip(squares / n_draws - mean * mean, 0.0, None) * n_draws / (n_draws - 1)
        return mean, np.sqrt(variance / n_draws)

    share_mean, share_se = _mean_se(share_sum, share_sq)
    spend_mean, spend_se = _mean_se(spend_sum, spend_sq)
    logger.debug("monte carlo finished", extra={"bidders": n, "draws": n_draws})
    return MonteCarloEstimate(
        tuple(b.id for b in ordered), n_draws, share_mean, share_se, spend_mean, spend_se
    )


# ============================================
# SINGLE-BIDDER PROBES
# ============================================

class ProbeField:
    """
    Opponents frozen at their filtering probabilities.

    Prices one extra bidder at any bid without re-running the sweep: the
    rank distribution above each insertion point is a prefix table and the
    expected price below it a suffix table, so a probe is a binary search.
    """

    def __init__(
        self,
        opponents: Sequence[Bidder],
        pi: Mapping[str, float],
        reserve: float,
        weights: PositionWeights = PositionWeights(),
    ):
        ordered = sorted((b for b in opponents if b.bid >= reserve), key=canonical_key)
        self.reserve = float(reserve)
        self.weights = weights
        self.opponent_ids = tuple(b.id for b in ordered)
        self._bids = np.array([b.bid for b in ordered], dtype=float)
        self._neg_bids = -self._bids
        self._priorities = np.array([b.priority for b in ordered], dtype=np.int64)
        try:
            self._pi = np.array([float(pi[b.id]) for b in ordered], dtype=float)
        except KeyError as exc:
            raise InvalidInputError(f"no filtering probability for opponent {exc.args[0]!r}") from None
        as_filter_vector(self._pi, len(ordered))

        n = len(ordered)
        ranks = np.zeros((n + 1, N_RANKS))
        ranks[0, 0] = 1.0
        for k in range(n):
            take = self._pi[k]
            ranks[k + 1] = (1.0 - take) * ranks[k]
            ranks[k + 1, 1:] += take * ranks[k, :-1]
        self._share_above = ranks @ weights.as_array()

        below = np.empty(n + 1)
        below[n] = self.reserve
        for k in range(n - 1, -1, -1):
            below[k] = self._pi[k] * self._bids[k] + (1.0 - self._pi[k]) * below[k + 1]
        self._price_below = below

    @property
    def opponent_bids(self) -> np.ndarray:
        return self._bids.copy()

    def positions(self, bids: np.ndarray, priority: int) -> np.ndarray:
        """Number of opponents ranked ahead of each probe bid."""
        ahead = np.searchsorted(self._neg_bids, -bids, side="left")
        through_ties = np.searchsorted(self._neg_bids, -bids, side="right")
        for k in np.nonzero(through_ties > ahead)[0]:
            tied = self._priorities[ahead[k]:through_ties[k]]
            ahead[k] += int(np.count_nonzero(tied < priority))
        return ahead

    def evaluate(self, bids: Sequence[float] | np.ndarray, priority: int) -> tuple[np.ndarray, np.ndarray]:
        """(eQ, eCPM) of a bidder with ``priority`` at each probe bid."""
        probe = np.atleast_1d(np.asarray(bids, dtype=float))
        position = self.positions(probe, priority)
        eq = self._share_above[position]
        ecpm = eq * self._price_below[position]
        below_reserve = probe < self.reserve
        return np.where(below_reserve, 0.0, eq), np.where(below_reserve, 0.0, ecpm)

    def evaluate_one(self, bid: float, priority: int) -> tuple[float, float]:
        eq, ecpm = self.evaluate([bid], priority)
        return float(eq[0]), float(ecpm[0])


def probe_field_for(
    market: MarketSnapshot,
    pi_by_id: Mapping[str, float],
    bidder_id: Optional[str] = None,
) -> ProbeField:
    """ProbeField over ``market`` minus ``bidder_id`` with opponents at ``pi_by_id``."""
    opponents = [b for b in market.bidders if b.id != bidder_id and b.bid >= market.reserve]
    return ProbeField(opponents, pi_by_id, market.reserve, market.weights)
