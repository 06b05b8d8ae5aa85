"""
Shared builders for the paced_gsp test suite.
Run with: pytest -v (add -m "not slow" to skip acceptance-scale checks)
"""

import datetime as dt
import json
import logging
from typing import Optional, Sequence

import pytest

from paced_gsp.market import Bidder, BidRecord, BidTrace, MarketSnapshot
from paced_gsp.regret import MarketDay

START = dt.date(2024, 1, 1)
RICH = 1e6  # a budget that never binds


# ============================================
# BUILDERS
# ============================================

def make_market(
    bids: Sequence[float],
    reserve: float = 10.0,
    budgets: Optional[Sequence[float]] = None,
    ids: Optional[Sequence[str]] = None,
) -> MarketSnapshot:
    """Bidders b1, b2, ... with priorities in list order and rich budgets unless given."""
    budgets = budgets if budgets is not None else [RICH] * len(bids)
    ids = ids if ids is not None else [f"b{k + 1}" for k in range(len(bids))]
    return MarketSnapshot(
        bidders=tuple(
            Bidder(id=i, bid=b, budget_per_mille=B, priority=k + 1)
            for k, (i, b, B) in enumerate(zip(ids, bids, budgets))
        ),
        reserve=reserve,
    )


def static_history(
    agent_bids: Sequence[float],
    opponent_bid: float = 10.0,
    reserve: float = 5.0,
    opponent_pi: Sequence[float] | float = 1.0,
) -> list[MarketDay]:
    """Agent ``a`` against one opponent ``o`` for len(agent_bids) days, pi fixed per day."""
    pis = opponent_pi if isinstance(opponent_pi, (list, tuple)) else [opponent_pi] * len(agent_bids)
    history = []
    for offset, (bid, pi) in enumerate(zip(agent_bids, pis)):
        market = MarketSnapshot(
            bidders=(
                Bidder(id="o", bid=opponent_bid, budget_per_mille=RICH, priority=1),
                Bidder(id="a", bid=bid, budget_per_mille=RICH, priority=2),
            ),
            reserve=reserve,
        )
        history.append(MarketDay(START + dt.timedelta(days=offset), market, {"o": pi, "a": 1.0}))
    return history


def make_trace(
    bids: Sequence[float],
    recommended: Optional[Sequence[Optional[float]]] = None,
    agent_id: str = "a",
    days: Optional[Sequence[int]] = None,
) -> BidTrace:
    """Trace of consecutive days from START, or of the given day offsets."""
    recommended = recommended if recommended is not None else [None] * len(bids)
    days = days if days is not None else range(len(bids))
    return BidTrace(
        agent_id=agent_id,
        records=tuple(
            BidRecord(date=START + dt.timedelta(days=d), bid=b, recommended_bid=r)
            for d, b, r in zip(days, bids, recommended)
        ),
    )


def write_market_files(directory, bids, monthly_budgets, reserve=10.0, page_views_thousands=3.0):
    """market.json and bidders.csv; with NP = 3 a monthly budget equals its per-mille budget."""
    (directory / "market.json").write_text(
        json.dumps({"reserve": reserve, "gamma": [0.33, 0.28, 0.22, 0.17], "page_views_thousands": page_views_thousands})
    )
    lines = ["agent_id,bid,monthly_budget,priority"]
    lines += [f"b{k + 1},{b},{B},{k + 1}" for k, (b, B) in enumerate(zip(bids, monthly_budgets))]
    (directory / "bidders.csv").write_text("\n".join(lines) + "\n")
    return directory / "market.json", directory / "bidders.csv"


# ============================================
# FIXTURES
# ============================================

@pytest.fixture(autouse=True)
def _quiet_package_logger():
    """main() attaches handlers to the package logger and stops propagation; undo both after each test."""
    yield
    package_logger = logging.getLogger("paced_gsp")
    package_logger.handlers.clear()
    package_logger.propagate = True
    package_logger.setLevel(logging.NOTSET)


@pytest.fixture
def two_bidder_market() -> MarketSnapshot:
    """Bids 30 and 20 at reserve 10; the first bidder's budget binds."""
    return make_market([30.0, 20.0], reserve=10.0, budgets=[2.0, RICH])


@pytest.fixture
def single_opponent() -> MarketSnapshot:
    """One unconstrained opponent bidding 10 over a reserve of 5."""
    return make_market([10.0], reserve=5.0, ids=["o"])
