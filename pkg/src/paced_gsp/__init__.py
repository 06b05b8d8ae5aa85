"""Budget-smoothed GSP auctions: expected outcomes, pacing, bid recommendation, replay and regret inference."""

from paced_gsp.engine import OutcomeTable, outcomes_dp, outcomes_oracle
from paced_gsp.errors import (
    InfeasibleGoalsError,
    InvalidInputError,
    MisalignedHistoryError,
    NonConvergenceError,
    OracleCapExceededError,
    PacedGspError,
)
from paced_gsp.market import Bidder, BidRecord, BidTrace, MarketSnapshot, PositionWeights, convert_budget
from paced_gsp.pacing import PacingSolution, solve_pacing
from paced_gsp.recommender import GoalRequest, integrity_suite, recommend_bid, recommend_for_goal
from paced_gsp.regret import build_rationalizable_set, compare_with_recommendation, infer_agent

__version__ = "0.1.0"

__all__ = [
    "Bidder",
    "BidRecord",
    "BidTrace",
    "GoalRequest",
    "InfeasibleGoalsError",
    "InvalidInputError",
    "MarketSnapshot",
    "MisalignedHistoryError",
    "NonConvergenceError",
    "OracleCapExceededError",
    "OutcomeTable",
    "PacedGspError",
    "PacingSolution",
    "PositionWeights",
    "build_rationalizable_set",
    "compare_with_recommendation",
    "convert_budget",
    "infer_agent",
    "integrity_suite",
    "outcomes_dp",
    "outcomes_oracle",
    "recommend_bid",
    "recommend_for_goal",
    "solve_pacing",
]
