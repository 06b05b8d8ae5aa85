"""Exception hierarchy shared by every paced_gsp module."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from paced_gsp.pacing import PacingSolution


class PacedGspError(Exception):
    """Base class for all library errors."""


class InvalidInputError(PacedGspError, ValueError):
    """Input failed validation (bad market, bad trace, bad flag value)."""


class OracleCapExceededError(InvalidInputError):
    """The enumeration oracle was asked to handle more bidders than its cap."""

    def __init__(self, n_bidders: int, cap: int):
        self.n_bidders = n_bidders
        self.cap = cap
        super().__init__(
            f"oracle cap exceeded: {n_bidders} active bidders, cap is {cap} "
            f"(enumeration needs 2^{n_bidders} configurations)"
        )


class InfeasibleGoalsError(InvalidInputError):
    """Joint impression goals ask for more than the whole inventory."""


class MisalignedHistoryError(InvalidInputError):
    """A bid trace refers to days the market history does not cover."""


class NonConvergenceError(PacedGspError):
    """A solver stopped at its iteration limit without meeting tolerance."""

    def __init__(self, message: str, solution: Any = None):
        super().__init__(message)
        self.solution: PacingSolution | None = solution
