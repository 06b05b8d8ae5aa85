"""
File formats: market.json, bidders.csv, traces.csv, outcomes.csv.

Loaders turn schema problems into ``InvalidInputError`` naming the file and
line (the header is line 1). Writers format every float with 12 significant
digits and replace the target atomically.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from paced_gsp.config.settings import settings
from paced_gsp.errors import InvalidInputError
from paced_gsp.market import (
    DEFAULT_GAMMA,
    BidRecord,
    Bidder,
    BidTrace,
    MarketSnapshot,
    PositionWeights,
    convert_budget,
)
from paced_gsp.regret import MarketDay
from paced_gsp.simulator import AllowanceRule, BidInterval, RegionConfig

PathLike = str | os.PathLike

# multi-region datasets keep one region per subdirectory holding this file
MARKET_FILE = "market.json"


# ============================================
# SCHEMAS
# ============================================

class RegionParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    days_in_month: int = Field(default=30, ge=1)
    weekday_multipliers: tuple[float, float, float, float, float, float, float] = (1.0,) * 7
    base_daily_volume: Optional[float] = Field(default=None, ge=0.0)
    allowance_rule: AllowanceRule = "remaining"


class MarketConfig(BaseModel):
    """market.json: reserve, position weights, monthly page views and the region's replay settings."""

    model_config = ConfigDict(frozen=True)

    reserve: float = Field(ge=0.0, allow_inf_nan=False)
    gamma: tuple[float, float, float, float] = DEFAULT_GAMMA
    page_views_thousands: float = Field(gt=0.0, allow_inf_nan=False)
    region: RegionParams = RegionParams()

    @property
    def weights(self) -> PositionWeights:
        return PositionWeights(gamma=self.gamma)

    def per_mille(self, monthly_budget: float) -> float:
        return convert_budget(monthly_budget, self.page_views_thousands)

    def region_config(self) -> RegionConfig:
        """Replay settings; without an explicit volume the daily volume is the one the conversion implies."""
        params = self.region
        volume = params.base_daily_volume
        if volume is None:
            volume = self.page_views_thousands * 1000.0 / (3.0 * params.days_in_month)
        return RegionConfig(
            reserve=self.reserve,
            weights=self.weights,
            days_in_month=params.days_in_month,
            weekday_multipliers=params.weekday_multipliers,
            base_daily_volume=volume,
            allowance_rule=params.allowance_rule,
        )


class BidderRow(BaseModel):
    """One bidders.csv row; dates are only needed for replay."""

    model_config = ConfigDict(frozen=True)

    agent_id: str = Field(min_length=1)
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    monthly_budget: float = Field(ge=0.0, allow_inf_nan=False)
    priority: int
    start_date: Optional[dt.date] = None
    end_date: Optional[dt.date] = None
    # filtering probability for `outcomes`; blank means unfiltered
    pi: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    def to_bidder(self, config: MarketConfig) -> Bidder:
        return Bidder(
            id=self.agent_id,
            bid=self.bid,
            budget_per_mille=config.per_mille(self.monthly_budget),
            priority=self.priority,
        )

    def to_interval(self) -> BidInterval:
        if self.start_date is None or self.end_date is None:
            raise InvalidInputError(f"bidder {self.agent_id!r}: start_date and end_date are required for replay")
        return BidInterval(
            agent_id=self.agent_id,
            bid=self.bid,
            monthly_budget=self.monthly_budget,
            start_date=self.start_date,
            end_date=self.end_date,
            priority=self.priority,
        )


# ============================================
# READING
# ============================================

def _describe(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'row'}: {e['msg']}" for e in error.errors())


def read_table(path: PathLike, required: Sequence[str]) -> pd.DataFrame:
    """A CSV as strings, blank cells as empty strings, after checking the header."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"{path}:1: unreadable CSV ({exc})") from None
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"{path}:1: missing column(s) {', '.join(missing)}")
    return frame


def _rows(frame: pd.DataFrame, path: PathLike, model: type[BaseModel], columns: Iterable[str]):
    """Validate every row into ``model``, yielding (line, instance)."""
    columns = [c for c in columns if c in frame.columns]
    for offset, record in enumerate(frame[columns].to_dict("records")):
        line = offset + 2
        payload = {k: (v if v != "" else None) for k, v in record.items()}
        try:
            yield line, model.model_validate({k: v for k, v in payload.items() if v is not None})
        except ValidationError as exc:
            raise InvalidInputError(f"{path}:{line}: {_describe(exc)}") from None


def load_market_config(path: PathLike) -> MarketConfig:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{path}: file not found")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return MarketConfig.model_validate(payload)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except ValidationError as exc:
        raise InvalidInputError(f"{path}: {_describe(exc)}") from None


def load_bidders(path: PathLike) -> list[BidderRow]:
    frame = read_table(path, ["agent_id", "bid", "monthly_budget", "priority"])
    rows = [row for _, row in _rows(frame, path, BidderRow, BidderRow.model_fields)]
    if not rows:
        raise InvalidInputError(f"{path}: no bidders")
    return rows


def market_from_rows(config: MarketConfig, rows: Iterable[BidderRow], date: Optional[dt.date] = None) -> MarketSnapshot:
    """The market of ``date`` (every row when ``date`` is None), budgets converted to per mille."""
    chosen = [
        r for r in rows
        if date is None or r.start_date is None or (r.start_date <= date <= (r.end_date or date))
    ]
    try:
        return MarketSnapshot(
            bidders=tuple(r.to_bidder(config) for r in chosen),
            reserve=config.reserve,
            weights=config.weights,
        )
    except ValidationError as exc:
        raise InvalidInputError(_describe(exc)) from None


class _TraceRow(BaseModel):
    agent_id: str = Field(min_length=1)
    date: dt.date
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    recommended_bid: Optional[float] = Field(default=None, ge=0.0)
    available_daily_budget: float = Field(default=0.0, ge=0.0)
    active: bool = True


def load_traces(path: PathLike) -> list[BidTrace]:
    frame = read_table(path, ["agent_id", "date", "bid"])
    grouped: dict[str, list[tuple[int, BidRecord]]] = {}
    for line, row in _rows(frame, path, _TraceRow, _TraceRow.model_fields):
        record = BidRecord(
            date=row.date,
            bid=row.bid,
            available_daily_budget=row.available_daily_budget,
            recommended_bid=row.recommended_bid,
            active=row.active,
        )
        grouped.setdefault(row.agent_id, []).append((line, record))

    traces = []
    for agent_id, entries in sorted(grouped.items()):
        entries.sort(key=lambda e: e[1].date)
        for (_, prev), (line, cur) in zip(entries, entries[1:]):
            if cur.date == prev.date:
                raise InvalidInputError(f"{path}:{line}: duplicate date {cur.date} for agent {agent_id!r}")
        traces.append(BidTrace(agent_id=agent_id, records=tuple(r for _, r in entries)))
    return traces


class _OutcomeRow(BaseModel):
    date: dt.date
    agent_id: str = Field(min_length=1)
    pi: float = Field(ge=0.0, le=1.0)
    volume: float = Field(ge=0.0)
    bid: float = Field(ge=0.0, allow_inf_nan=False)
    budget_per_mille: float = Field(ge=0.0)
    priority: int
    active: bool


OUTCOME_COLUMNS = (
    "date", "agent_id", "pi", "eq", "ecpm", "spend", "volume",
    "bid", "budget_per_mille", "priority", "active",
)
LEDGER_COLUMNS = ("date", "agent_id", "allowance", "carryover", "available", "spend")
TRACE_COLUMNS = ("agent_id", "date", "bid", "recommended_bid", "available_daily_budget", "active")
BIDDER_COLUMNS = ("agent_id", "bid", "monthly_budget", "start_date", "end_date", "priority")


def load_history(outcomes_path: PathLike, config: MarketConfig) -> list[MarketDay]:
    """Per-day markets and solved pi rebuilt from a simulator outcomes.csv."""
    frame = read_table(outcomes_path, list(_OutcomeRow.model_fields))
    rows = [row for _, row in _rows(frame, outcomes_path, _OutcomeRow, _OutcomeRow.model_fields)]
    return _assemble_history(rows, config)


def history_from_outcomes(records: Iterable[Mapping[str, Any]], config: MarketConfig) -> list[MarketDay]:
    """Same as ``load_history`` for outcome rows still in memory (``RegionRun.outcome_rows()``)."""
    try:
        rows = [_OutcomeRow.model_validate(dict(r)) for r in records]
    except ValidationError as exc:
        raise InvalidInputError(f"outcome row: {_describe(exc)}") from None
    return _assemble_history(rows, config)


def _assemble_history(rows: Iterable[_OutcomeRow], config: MarketConfig) -> list[MarketDay]:
    days: dict[dt.date, list[_OutcomeRow]] = {}
    for row in rows:
        days.setdefault(row.date, []).append(row)

    history = []
    for date, day_rows in sorted(days.items()):
        market = MarketSnapshot(
            bidders=tuple(
                Bidder(id=r.agent_id, bid=r.bid, budget_per_mille=r.budget_per_mille, priority=r.priority)
                for r in day_rows
            ),
            reserve=config.reserve,
            weights=config.weights,
        )
        pi = {r.agent_id: r.pi for r in day_rows if r.active}
        history.append(MarketDay(date, market, pi, day_rows[0].volume))
    return history


def region_directories(path: PathLike) -> list[Path]:
    """``path`` itself when it holds a market.json, else its subdirectories that do."""
    path = Path(path)
    if path.is_file():
        return [path.parent]
    if (path / MARKET_FILE).is_file():
        return [path]
    regions = sorted(p for p in path.iterdir() if (p / MARKET_FILE).is_file()) if path.is_dir() else []
    if not regions:
        raise InvalidInputError(f"{path}: no {MARKET_FILE} found")
    return regions


# ============================================
# WRITING
# ============================================

def format_value(value: Any, digits: Optional[int] = None) -> str:
    digits = settings.float_sig_digits if digits is None else digits
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.{digits}g}"
    if isinstance(value, (dt.date, dt.datetime)):
        return value.isoformat()
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def round_sig(value: float, digits: Optional[int] = None) -> float:
    """``value`` as it reads back from a written file."""
    return float(format_value(float(value), digits))


def _replace_atomically(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_csv(path: PathLike, rows: Iterable[Mapping[str, Any]] | pd.DataFrame, columns: Sequence[str]) -> Path:
    """Write ``rows`` under a header of ``columns`` (RFC-4180 quoting, LF line ends)."""
    path = Path(path)
    records = rows.to_dict("records") if isinstance(rows, pd.DataFrame) else list(rows)
    frame = pd.DataFrame(
        [[format_value(_plain(r.get(c))) for c in columns] for r in records],
        columns=list(columns),
        dtype=str,
    )
    _replace_atomically(path, frame.to_csv(index=False, lineterminator="\n"))
    return path


def _plain(value: Any) -> Any:
    """numpy scalars to Python scalars."""
    return value.item() if hasattr(value, "item") and not isinstance(value, (str, bytes)) else value


def _json_ready(value: Any) -> Any:
    value = _plain(value)
    if isinstance(value, float):
        return value if not math.isfinite(value) else round_sig(value)
    if isinstance(value, Mapping):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (dt.date, dt.datetime)):
        return value.isoformat()
    return value


def dumps_json(payload: Any) -> str:
    return json.dumps(_json_ready(payload), indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    _replace_atomically(path, dumps_json(payload))
    return path


def trace_rows(traces: Iterable[BidTrace]) -> list[dict]:
    return [
        {
            "agent_id": trace.agent_id,
            "date": record.date,
            "bid": record.bid,
            "recommended_bid": record.recommended_bid,
            "available_daily_budget": record.available_daily_budget,
            "active": record.active,
        }
        for trace in traces
        for record in trace.records
    ]
