"""
Budget smoothing: the filtering probabilities that balance every budget.

Each bidder's probability solves pi_i = min{1, B_i / eCPM_i(pi)}, and
pi_i = 1 whenever eCPM_i(pi) = 0. The answer is defined as the limit of the
damped iteration started at pi = 1; a Gauss-Newton solver on the squared
residual is available for strongly coupled markets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Collection, Literal, Optional

import numpy as np

from paced_gsp.config.settings import settings
from paced_gsp.engine import OutcomeTable, expected_outcomes, outcomes_oracle
from paced_gsp.errors import InvalidInputError
from paced_gsp.market import MarketSnapshot, canonical_sort
from paced_gsp.utils.retry import retry_on_nonconvergence

logger = logging.getLogger(__name__)

PacingMethod = Literal["fixed-point", "gauss-newton"]
METHODS: tuple[str, ...] = ("fixed-point", "gauss-newton")

LINE_SEARCH_HALVINGS = 30
POLISH_STEPS = 3
# the exact Jacobian costs one sweep per bidder
POLISH_MAX_BIDDERS = 200


@dataclass(frozen=True)
class PacingSolution:
    bidder_ids: tuple[str, ...]
    pi: np.ndarray
    residual_inf_norm: float
    iterations: int
    converged: bool
    method: str
    outcomes: OutcomeTable

    def pi_by_id(self) -> dict[str, float]:
        return {bidder_id: float(p) for bidder_id, p in zip(self.bidder_ids, self.pi)}


def balanced_budget_target(budgets: np.ndarray, ecpm: np.ndarray) -> np.ndarray:
    """min{1, B/eCPM}, with 1 wherever eCPM is zero."""
    target = np.ones_like(ecpm)
    positive = ecpm > 0.0
    target[positive] = np.minimum(1.0, budgets[positive] / ecpm[positive])
    return target


class _PacingProblem:
    """Sorted market data plus the residual map of the balanced-budget system."""

    def __init__(self, market: MarketSnapshot, pinned: Collection[str] = ()):
        ordered = canonical_sort(market)
        self.ids = tuple(b.id for b in ordered)
        self.bids = np.array([b.bid for b in ordered], dtype=float)
        self.budgets = np.array([b.budget_per_mille for b in ordered], dtype=float)
        self.reserve = market.reserve
        self.weights = market.weights
        self.pinned = np.array([b.id in pinned for b in ordered], dtype=bool)
        self.free = ~self.pinned

    @property
    def size(self) -> int:
        return self.bids.size

    def start(self) -> np.ndarray:
        return np.ones(self.size)

    def outcomes(self, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return expected_outcomes(self.bids, pi, self.reserve, self.weights)

    def target(self, pi: np.ndarray, ecpm: np.ndarray) -> np.ndarray:
        target = balanced_budget_target(self.budgets, ecpm)
        target[self.pinned] = 1.0
        return target

    def residual(self, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pi - target, target, eCPM) at ``pi``."""
        _, ecpm = self.outcomes(pi)
        target = self.target(pi, ecpm)
        return pi - target, target, ecpm

    def converged(self, gap: np.ndarray, ecpm: np.ndarray, tol: float) -> tuple[bool, float]:
        """Residual norm, and whether both the residual and the spend gap are within ``tol``."""
        residual = float(np.max(np.abs(gap))) if gap.size else 0.0
        spend_gap = float(np.max(np.abs(gap) * ecpm)) if gap.size else 0.0
        return residual <= tol and spend_gap <= tol, residual

    def solution(self, pi: np.ndarray, iterations: int, converged: bool, residual: float, method: str) -> PacingSolution:
        eq, ecpm = self.outcomes(pi)
        table = OutcomeTable(self.ids, self.bids, pi.copy(), eq, ecpm)
        return PacingSolution(self.ids, pi.copy(), residual, iterations, converged, method, table)

    def jacobian(self, pi: np.ndarray, ecpm: np.ndarray) -> np.ndarray:
        """
        Jacobian of pi - target(pi) over the free coordinates.

        eCPM_i is multilinear in the others' pi, so column j is exactly
        eCPM(pi_j = 1) - eCPM(pi_j = 0). Clipped rows (B_i >= eCPM_i, ties
        included) and zero-eCPM rows have a flat target.
        """
        n = self.size
        unclipped = self.free & (ecpm > 0.0) & (self.budgets < ecpm)
        scale = np.zeros(n)
        scale[unclipped] = -self.budgets[unclipped] / ecpm[unclipped] ** 2

        d_target = np.zeros((n, n))
        for j in np.nonzero(self.free)[0]:
            high, low = pi.copy(), pi.copy()
            high[j], low[j] = 1.0, 0.0
            column = self.outcomes(high)[1] - self.outcomes(low)[1]
            column[j] = 0.0
            d_target[:, j] = scale * column

        jac = np.eye(n) - d_target
        return jac[np.ix_(self.free, self.free)]


def _newton_step(problem: _PacingProblem, pi: np.ndarray, gap: np.ndarray, ecpm: np.ndarray) -> np.ndarray:
    step = np.zeros_like(pi)
    step[problem.free] = np.linalg.lstsq(problem.jacobian(pi, ecpm), -gap[problem.free], rcond=None)[0]
    return step


def _polish(problem: _PacingProblem, pi: np.ndarray, tol: float) -> tuple[np.ndarray, float]:
    """
    Full Newton steps from a converged iterate, kept while the squared
    residual shrinks and the iterate stays converged.

    A damped stop within ``tol`` of the target can leave pi about
    ``tol``/(1 - contraction) from the fixed point.
    """
    gap, _, ecpm = problem.residual(pi)
    objective = float(gap @ gap)
    if problem.size > POLISH_MAX_BIDDERS:
        return pi, float(np.max(np.abs(gap))) if gap.size else 0.0
    for _ in range(POLISH_STEPS):
        if objective == 0.0:
            break
        candidate = np.clip(pi + _newton_step(problem, pi, gap, ecpm), 0.0, 1.0)
        candidate_gap, _, candidate_ecpm = problem.residual(candidate)
        candidate_objective = float(candidate_gap @ candidate_gap)
        if candidate_objective >= objective or not problem.converged(candidate_gap, candidate_ecpm, tol)[0]:
            break
        pi, gap, ecpm, objective = candidate, candidate_gap, candidate_ecpm, candidate_objective
    return pi, float(np.max(np.abs(gap))) if gap.size else 0.0


def _fixed_point(problem: _PacingProblem, tol: float, max_iter: int, damping: float) -> PacingSolution:
    pi = problem.start()
    iterations = 0
    while True:
        gap, target, ecpm = problem.residual(pi)
        done, residual = problem.converged(gap, ecpm, tol)
        if done or iterations >= max_iter:
            break
        pi = (1.0 - damping) * pi + damping * target
        iterations += 1
    if done:
        pi, residual = _polish(problem, pi, tol)
    return problem.solution(pi, iterations, done, residual, "fixed-point")


def _gauss_newton(problem: _PacingProblem, tol: float, max_iter: int, damping: float) -> PacingSolution:
    pi = problem.start()
    iterations = 0
    while True:
        gap, target, ecpm = problem.residual(pi)
        done, residual = problem.converged(gap, ecpm, tol)
        if done or iterations >= max_iter:
            break
        iterations += 1

        objective = float(gap @ gap)
        step = _newton_step(problem, pi, gap, ecpm)

        alpha = 1.0
        accepted = None
        for _ in range(LINE_SEARCH_HALVINGS):
            candidate = np.clip(pi + alpha * step, 0.0, 1.0)
            candidate_gap = problem.residual(candidate)[0]
            if float(candidate_gap @ candidate_gap) < objective:
                accepted = candidate
                break
            alpha *= 0.5

        if accepted is None:
            # line search failed: one damped fixed-point step instead
            accepted = (1.0 - damping) * pi + damping * target
        pi = accepted
    return problem.solution(pi, iterations, done, residual, "gauss-newton")


def solve_pacing(
    market: MarketSnapshot,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    method: Optional[str] = None,
    damping: Optional[float] = None,
    pinned: Collection[str] = (),
) -> PacingSolution:
    """
    Solve pi_i = min{1, B_i / eCPM_i(pi)} for the active bidders of ``market``.

    Convergence requires the residual max|pi - target| and the spend gap
    max|pi - target|·eCPM both within ``tol``, so budget compliance and
    complementarity hold to ``tol`` in money as well as in probability.
    Bidders in ``pinned`` are held at pi = 1.

    Args:
        market: the day's market.
        tol: convergence tolerance (default from settings).
        max_iter: iteration cap (default from settings).
        method: ``fixed-point`` or ``gauss-newton``.
        damping: lambda in pi <- (1 - lambda)·pi + lambda·target.
        pinned: ids of bidders held unfiltered.

    Returns:
        PacingSolution; ``converged`` is False when the cap was hit.
    """
    tol = settings.pacing_tol if tol is None else tol
    max_iter = settings.pacing_max_iter if max_iter is None else max_iter
    method = settings.pacing_method if method is None else method
    damping = settings.pacing_damping if damping is None else damping

    if not tol > 0:
        raise InvalidInputError(f"tol must be positive, got {tol}")
    if int(max_iter) != max_iter or max_iter < 1:
        raise InvalidInputError(f"max_iter must be a positive integer, got {max_iter}")
    if not 0.0 < damping <= 1.0:
        raise InvalidInputError(f"damping must lie in (0, 1], got {damping}")
    if method not in METHODS:
        raise InvalidInputError(f"unknown pacing method {method!r}; expected one of {METHODS}")

    problem = _PacingProblem(market, pinned)
    solver = _fixed_point if method == "fixed-point" else _gauss_newton
    solution = solver(problem, tol, int(max_iter), damping)

    if not solution.converged:
        logger.warning(
            f"Pacing did not converge after {solution.iterations} iterations "
            f"(residual {solution.residual_inf_norm:.3e}, method {method})",
            extra={"bidders": problem.size, "method": method},
        )
    else:
        logger.debug(
            "pacing converged",
            extra={"bidders": problem.size, "iterations": solution.iterations, "method": method},
        )
    return solution


@retry_on_nonconvergence(max_retries=settings.pacing_retries, backoff=0.5)
def _solve_with_damping(market: MarketSnapshot, damping: float = 0.5, **kwargs) -> PacingSolution:
    return solve_pacing(market, damping=damping, **kwargs)


def solve_pacing_with_retry(
    market: MarketSnapshot,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    method: Optional[str] = None,
    damping: Optional[float] = None,
    pinned: Collection[str] = (),
) -> PacingSolution:
    """``solve_pacing`` that retries with halved damping while it fails to converge."""
    return _solve_with_damping(
        market,
        damping=settings.pacing_damping if damping is None else damping,
        tol=tol,
        max_iter=max_iter,
        method=method,
        pinned=pinned,
    )


def balanced_budget_residual(
    market: MarketSnapshot,
    pi: np.ndarray,
    engine: Literal["dp", "oracle"] = "dp",
    pinned: Collection[str] = (),
) -> float:
    """max_i |pi_i - min{1, B_i/eCPM_i(pi)}| recomputed at ``pi`` with the chosen engine."""
    problem = _PacingProblem(market, pinned)
    pi = np.asarray(pi, dtype=float)
    if engine == "oracle":
        ecpm = outcomes_oracle(market, pi).ecpm
    else:
        ecpm = problem.outcomes(pi)[1]
    gap = pi - problem.target(pi, ecpm)
    return float(np.max(np.abs(gap))) if gap.size else 0.0
