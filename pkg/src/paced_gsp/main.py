#!/usr/bin/env python
"""
paced-gsp - command-line entry point

Subcommands:
- pace: solve the pacing equilibrium of a market
- outcomes: expected share and spend at given filtering probabilities
- recommend: bid for a budget, or bid and budget for an impression goal
- simulate: replay one region (or a directory of regions) day by day
- infer: minimum-regret values from observed bid traces
- compare-reco: own regret against following the recommended bids
- cluster: group agents by how often they change their bid
- gen-market: synthetic regions for exercising the pipeline
- integrity: the recommendation tool's scale and monotonicity checks

Exit codes: 0 success, 1 invalid input or failed integrity check,
2 pacing did not converge.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterator, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from paced_gsp.config.settings import settings
from paced_gsp.engine import outcomes_dp, outcomes_oracle
from paced_gsp.errors import InvalidInputError, NonConvergenceError
from paced_gsp.generator import SyntheticMarketSpec, generate_market, summarize_population
from paced_gsp.io import (
    LEDGER_COLUMNS,
    MARKET_FILE,
    OUTCOME_COLUMNS,
    dumps_json,
    load_bidders,
    load_market_config,
    market_from_rows,
    region_directories,
    write_csv,
    write_json,
)
from paced_gsp.market import canonical_sort
from paced_gsp.pacing import METHODS, solve_pacing_with_retry
from paced_gsp.pipeline import TRACES_FILE, CohortAnalysis, RegionAnalysis
from paced_gsp.recommender import GoalRequest, integrity_suite, recommend_bid, recommend_for_goal
from paced_gsp.regret import RegretReport
from paced_gsp.simulator import BidSchedule, simulate_region
from paced_gsp.utils.logger import setup_logger

logger = logging.getLogger("paced_gsp.main")

BIDDERS_FILE = "bidders.csv"

TABLE_COLUMNS = ("agent_id", "bid", "pi", "eq", "ecpm", "unconditional_share", "unconditional_spend")
PACING_COLUMNS = ("agent_id", "bid", "budget_per_mille", "pi", "eq", "ecpm", "unconditional_share", "unconditional_spend")
REPORT_COLUMNS = (
    "region", "agent_id", "v_star", "eps_star", "relative_regret", "per_impression_regret",
    "eps_reco", "classification", "budget_constrained_flag", "days",
)
HISTOGRAM_COLUMNS = ("bin_lower", "bin_upper", "count")
ADHERENCE_COLUMNS = ("cluster", "month", "fraction", "agents")
CLUSTER_COLUMNS = ("region", "agent_id", "cluster", "frequency")
CLUSTER_SUMMARY_COLUMNS = (
    "region", "cluster", "agents", "mean_frequency", "mean_active_duration", "mean_bid", "flagged",
)
INTEGRITY_COLUMNS = ("name", "passed", "max_violation")

Command = Literal[
    "pace", "outcomes", "recommend", "simulate", "infer", "compare-reco", "cluster", "gen-market", "integrity",
]

# ============================================
# RUN CONFIGURATION
# ============================================

_NEEDS_MARKET = {"pace", "outcomes", "recommend", "integrity", "simulate"}
_NEEDS_BIDDERS = {"pace", "outcomes", "recommend", "integrity"}
_NEEDS_TRACES = {"infer", "compare-reco", "cluster"}
_NEEDS_OUT = {"pace", "outcomes", "simulate", "infer", "compare-reco", "cluster", "gen-market"}
_STOCHASTIC = {"gen-market"}


class RunConfig(BaseModel):
    """Validated command line. Flags left out fall back to settings."""

    model_config = ConfigDict(frozen=True)

    command: Command
    market: Optional[Path] = None
    bidders: Optional[Path] = None
    traces: Optional[Path] = None
    out: Optional[Path] = None
    seed: Optional[int] = Field(default=None, ge=0)
    tol: Optional[float] = Field(default=None, gt=0.0)
    max_iter: Optional[int] = Field(default=None, ge=1)
    method: Optional[Literal["fixed-point", "gauss-newton"]] = None
    oracle: bool = False
    budget: Optional[float] = Field(default=None, ge=0.0, allow_inf_nan=False)
    goal: Optional[float] = Field(default=None, ge=0.0, allow_inf_nan=False)
    inventory: Optional[float] = Field(default=None, gt=0.0, allow_inf_nan=False)
    k: Optional[int] = Field(default=None, ge=1)
    jobs: int = Field(default=1, ge=1)
    delta: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def _required_flags(self) -> RunConfig:
        missing = [
            flag
            for flag, commands in (
                ("--market", _NEEDS_MARKET),
                ("--bidders", _NEEDS_BIDDERS),
                ("--traces", _NEEDS_TRACES),
                ("--out", _NEEDS_OUT),
                ("--seed", _STOCHASTIC),
            )
            if self.command in commands and getattr(self, flag.lstrip("-")) is None
        ]
        if missing:
            raise ValueError(f"{self.command} requires {', '.join(missing)}")
        if self.command == "recommend":
            goal_mode = self.goal is not None or self.inventory is not None
            if (self.budget is None) == (not goal_mode):
                raise ValueError("recommend takes either --budget or --goal with --inventory")
            if goal_mode and (self.goal is None or self.inventory is None):
                raise ValueError("--goal and --inventory go together")
        return self

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        values = {k.replace("-", "_"): v for k, v in vars(args).items() if v is not None}
        try:
            return cls.model_validate(values)
        except ValidationError as exc:
            details = "; ".join(
                f"--{'-'.join(str(p) for p in e['loc']).replace('_', '-')}: {e['msg']}" if e["loc"] else e["msg"]
                for e in exc.errors()
            )
            raise InvalidInputError(details) from None

    def inputs(self) -> list[Path]:
        return [p.resolve() for p in (self.market, self.bidders, self.traces) if p is not None and p.is_file()]

    def output(self, name: str, directory: Optional[Path] = None) -> Path:
        """Path of an artifact; refuses to point at any input file."""
        path = (directory or self.out) / name
        _guard(path, self.inputs())
        return path

    def overrides(self) -> dict:
        return {
            name: value
            for name, value in (
                ("pacing_tol", self.tol),
                ("pacing_max_iter", self.max_iter),
                ("pacing_method", self.method),
                ("classification_delta", self.delta),
                ("cluster_k", self.k),
            )
            if value is not None
        }


def _guard(path: Path, inputs: Sequence[Path]) -> None:
    if path.resolve() in inputs:
        raise InvalidInputError(f"refusing to overwrite input file {path}")


@contextlib.contextmanager
def overridden_settings(values: dict) -> Iterator[None]:
    """Apply flag values to the settings for the duration of one command."""
    previous = {name: getattr(settings, name) for name in values}
    for name, value in values.items():
        setattr(settings, name, value)
    try:
        yield
    finally:
        for name, value in previous.items():
            setattr(settings, name, value)


def _banner(title: str, **details) -> None:
    logger.info("=" * 70)
    logger.info(title)
    logger.info("=" * 70)
    for key, value in details.items():
        logger.info(f"{key}: {value}")
    if details:
        logger.info("-" * 70)


def _load_market(config: RunConfig):
    market_config = load_market_config(config.market)
    rows = load_bidders(config.bidders)
    return market_config, rows, market_from_rows(market_config, rows)


# ============================================
# MARKET SUBCOMMANDS
# ============================================

def pace(config: RunConfig) -> int:
    """
    Solve pacing for the market in --market/--bidders and write pacing.csv.

    Raises:
        NonConvergenceError: after writing pacing.csv when the solve hit its cap.
    """
    _, _, market = _load_market(config)
    _banner(
        "PACING EQUILIBRIUM",
        Bidders=len(market.bidders),
        Reserve=market.reserve,
        Method=settings.pacing_method,
        Tolerance=settings.pacing_tol,
    )
    solution = solve_pacing_with_retry(market)
    table = outcomes_oracle(market, solution.pi) if config.oracle else solution.outcomes
    budgets = {b.id: b.budget_per_mille for b in market.bidders}
    rows = [dict(row, budget_per_mille=budgets[row["agent_id"]]) for row in table.to_records()]
    path = write_csv(config.output("pacing.csv"), rows, PACING_COLUMNS)
    logger.info(
        f"Pacing written to: {path}",
        extra={"iterations": solution.iterations, "residual": solution.residual_inf_norm},
    )
    if not solution.converged:
        raise NonConvergenceError(
            f"pacing stopped after {solution.iterations} iterations, residual {solution.residual_inf_norm:.3e}",
            solution,
        )
    return 0


def outcomes(config: RunConfig) -> int:
    """eQ and eCPM at the pi column of bidders.csv (blank or absent means 1)."""
    _, rows, market = _load_market(config)
    pi_by_id = {r.agent_id: (1.0 if r.pi is None else r.pi) for r in rows}
    pi = [pi_by_id[b.id] for b in canonical_sort(market)]
    engine = "oracle" if config.oracle else "dp"
    _banner("EXPECTED OUTCOMES", Bidders=len(market.bidders), Engine=engine)
    table = outcomes_oracle(market, pi) if config.oracle else outcomes_dp(market, pi)
    path = write_csv(config.output("outcomes.csv"), table.to_records(), TABLE_COLUMNS)
    logger.info(f"Outcomes written to: {path}")
    return 0


def recommend(config: RunConfig) -> int:
    """Recommendation for a new bidder joining --bidders; JSON on stdout."""
    _, _, market = _load_market(config)
    if config.budget is not None:
        payload = recommend_bid(market, config.budget).to_json_dict()
    else:
        request = GoalRequest(goal=config.goal, inventory=config.inventory)
        payload = recommend_for_goal(market, request).to_json_dict()
    logger.info(f"Recommended bid {payload['bid']:.6g} ({payload['corner_case']})")
    sys.stdout.write(dumps_json(payload))
    if config.out is not None:
        write_json(config.output("recommendation.json"), payload)
    return 0


def integrity(config: RunConfig) -> int:
    """Run the four checks; exit 1 when any exceeds tolerance."""
    _, _, market = _load_market(config)
    _banner("INTEGRITY SUITE", Bidders=len(market.bidders))
    report = integrity_suite(market)
    for check in report.checks:
        logger.info(f"{check.name}: {'ok' if check.passed else 'FAILED'} (max violation {check.max_violation:.3e})")
    if config.out is not None:
        write_csv(config.output("integrity.csv"), [c.model_dump() for c in report.checks], INTEGRITY_COLUMNS)
    return 0 if report.passed else 1


# ============================================
# REPLAY
# ============================================

def _simulate_one(
    market_path: Path, bidders_path: Path, out_dir: Path, inputs: list[Path], values: dict
) -> tuple[str, int, int]:
    """One region's replay; runs in a worker process when --jobs > 1."""
    with overridden_settings(values):
        market_config = load_market_config(market_path)
        schedule = BidSchedule(row.to_interval() for row in load_bidders(bidders_path))
        run = simulate_region(market_config.region_config(), schedule)
    for name, rows, columns in (
        ("outcomes.csv", run.outcome_rows(), OUTCOME_COLUMNS),
        ("ledgers.csv", run.ledger_rows(), LEDGER_COLUMNS),
    ):
        _guard(out_dir / name, inputs)
        write_csv(out_dir / name, rows, columns)
    return market_path.parent.name, len(run.days), len(run.flagged_days)


def simulate(config: RunConfig) -> int:
    """
    Replay --market (a market.json, a region directory, or a directory of regions).

    Each region's bids come from its bidders.csv; --bidders overrides it for
    a single region. Several regions are written to matching subdirectories
    of --out and fan out over --jobs processes.
    """
    market_path = config.market
    regions = [market_path.parent] if market_path.is_file() else region_directories(market_path)
    many = len(regions) > 1 or regions[0] != (market_path.parent if market_path.is_file() else market_path)
    if config.bidders is not None and many:
        raise InvalidInputError("--bidders applies to a single region only")

    tasks = []
    for region in regions:
        region_market = market_path if market_path.is_file() else region / MARKET_FILE
        bidders = config.bidders or region / BIDDERS_FILE
        out_dir = config.out / region.name if many else config.out
        inputs = [p.resolve() for p in (region_market, bidders, region / TRACES_FILE)] + config.inputs()
        tasks.append((region_market, bidders, out_dir, inputs, config.overrides()))

    _banner("REGION REPLAY", Regions=len(tasks), Jobs=config.jobs)
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_simulate_one, *zip(*tasks)))
    else:
        results = [_simulate_one(*task) for task in tasks]

    flagged = sum(r[2] for r in results)
    for name, days, bad in results:
        logger.info(f"{name}: {days} days, {bad} flagged")
    if flagged:
        raise NonConvergenceError(f"{flagged} simulated day(s) did not converge; outputs were written")
    return 0


# ============================================
# ANALYSIS
# ============================================

def _cohort(config: RunConfig) -> CohortAnalysis:
    options = {"k": config.k, "delta": config.delta}
    traces = config.traces
    if traces.is_file():
        regions = [RegionAnalysis.from_directory(traces.parent, traces, config.market, **options)]
    else:
        regions = [RegionAnalysis.from_directory(d, market_path=None, **options) for d in region_directories(traces)]
    cohort = CohortAnalysis(regions)
    info = cohort.get_pipeline_info()
    _banner("BID TRACE ANALYSIS", Regions=info["regions"], Agents=info["agents"], Eligible=info["eligible_agents"])
    return cohort


def _report_row(region: str, report: RegretReport) -> dict:
    row = report.model_dump()
    row["region"] = region
    row["budget_constrained_flag"] = report.budget_constrained
    return row


def infer(config: RunConfig) -> int:
    reports = _cohort(config).infer()
    path = write_csv(config.output("report.csv"), [_report_row(*r) for r in reports], REPORT_COLUMNS)
    logger.info(f"{len(reports)} agents inferred; report written to: {path}")
    return 0


def compare_reco(config: RunConfig) -> int:
    cohort = _cohort(config)
    reports = cohort.compare()
    write_csv(config.output("report.csv"), [_report_row(*r) for r in reports], REPORT_COLUMNS)

    counts, edges = cohort.histogram([r for _, r in reports])
    write_csv(
        config.output("regret_histogram.csv"),
        [{"bin_lower": lo, "bin_upper": hi, "count": n} for lo, hi, n in zip(edges[:-1], edges[1:], counts)],
        HISTOGRAM_COLUMNS,
    )
    write_csv(config.output("adherence.csv"), cohort.adherence().rows(), ADHERENCE_COLUMNS)

    tally: dict[str, int] = {}
    for _, report in reports:
        tally[report.classification.value] = tally.get(report.classification.value, 0) + 1
    logger.info(f"Compared {len(reports)} agents", extra={"classes": tally})
    return 0


def cluster(config: RunConfig) -> int:
    cohort = _cohort(config)
    clusters = cohort.cluster()
    if not clusters:
        raise InvalidInputError("no region had agents left to cluster")

    by_region = {region.region_id: region for region in cohort.regions}
    assignments, summaries = [], []
    for region_id, result in clusters.items():
        traces = {t.agent_id: t for t in by_region[region_id].traces}
        assignments.extend(
            {
                "region": region_id,
                "agent_id": agent_id,
                "cluster": label,
                "frequency": traces[agent_id].bid_change_frequency,
            }
            for agent_id, label in sorted(result.assignments.items())
        )
        summary = by_region[region_id].summarize(result)
        summary["region"] = region_id
        summary["flagged"] = result.flagged
        summaries.extend(summary.to_dict("records"))

    write_csv(config.output("clusters.csv"), assignments, CLUSTER_COLUMNS)
    write_csv(config.output("cluster_summary.csv"), summaries, CLUSTER_SUMMARY_COLUMNS)
    write_csv(config.output("adherence.csv"), cohort.adherence(clusters).rows(), ADHERENCE_COLUMNS)
    logger.info(f"Clustered {len(assignments)} agents across {len(clusters)} region(s)")
    return 0


# ============================================
# SYNTHETIC MARKETS
# ============================================

def gen_market(config: RunConfig) -> int:
    """
    Generate synthetic regions; --market optionally names a calibration YAML.

    One region is written straight into --out, several into --out/region_XXX.
    """
    spec = SyntheticMarketSpec.from_yaml(config.market, seed=config.seed)
    _banner("SYNTHETIC MARKET", Seed=spec.seed, Regions=spec.n_regions, Days=spec.n_days)
    datasets = generate_market(spec)
    for dataset in datasets:
        directory = config.out if len(datasets) == 1 else config.out / dataset.region_id
        for name in (MARKET_FILE, BIDDERS_FILE, TRACES_FILE):
            _guard(directory / name, config.inputs())
        dataset.write(directory)
        logger.info(f"{dataset.region_id}: {len(dataset.traces)} agents written to {directory}")

    population = summarize_population(d.draw for d in datasets)
    write_json(
        config.output("summary.json"),
        {
            "seed": spec.seed,
            "regions": [d.region_id for d in datasets],
            "population": population.model_dump(),
            "relative_errors": population.relative_errors(spec),
            "flagged_days": {d.region_id: [str(day) for day in d.run.flagged_days] for d in datasets},
        },
    )
    return 0


# ============================================
# ENTRY POINT
# ============================================

COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "pace": pace,
    "outcomes": outcomes,
    "recommend": recommend,
    "simulate": simulate,
    "infer": infer,
    "compare-reco": compare_reco,
    "cluster": cluster,
    "gen-market": gen_market,
    "integrity": integrity,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors become InvalidInputError so they exit 1 like any other bad input."""

    def error(self, message: str):
        raise InvalidInputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="paced-gsp",
        description="Budget-smoothed GSP auctions: pacing, recommendations, replay and regret inference",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Pacing equilibrium of one market
  paced-gsp pace --market market.json --bidders bidders.csv --out run/ --tol 1e-8

  # Bid recommendation for a per-mille budget
  paced-gsp recommend --market market.json --bidders bidders.csv --budget 2.0

  # Synthetic pipeline
  paced-gsp gen-market --seed 42 --out data/
  paced-gsp simulate --market data/ --out data/ --jobs 4
  paced-gsp infer --traces data/ --out reports/
  paced-gsp compare-reco --traces data/ --out reports/
  paced-gsp cluster --traces data/ --out reports/ --k 3
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Subcommand")

    def add(name: str, help: str, *flags: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help)
        for flag in flags:
            _FLAGS[flag](sub)
        return sub

    add("pace", "Solve the pacing equilibrium", "market", "bidders", "out", "tol", "max-iter", "method", "oracle")
    add("outcomes", "Expected outcomes at given filtering probabilities", "market", "bidders", "out", "oracle")
    add(
        "recommend", "Bid recommendation for a budget or an impression goal",
        "market", "bidders", "out", "budget", "goal", "inventory", "tol", "max-iter", "method",
    )
    add("simulate", "Replay regions day by day", "market", "bidders", "out", "jobs", "tol", "max-iter", "method")
    add("infer", "Infer values from bid traces", "traces", "market", "out")
    add("compare-reco", "Compare own regret with following the recommendation", "traces", "market", "out", "delta")
    add("cluster", "Cluster agents by bid-change frequency", "traces", "market", "out", "k")
    add("gen-market", "Generate synthetic regions", "seed", "out", "market")
    add("integrity", "Recommendation tool integrity checks", "market", "bidders", "out", "tol", "max-iter", "method")
    return parser


_FLAGS: dict[str, Callable[[argparse.ArgumentParser], object]] = {
    "market": lambda p: p.add_argument("--market", type=Path, help="market.json, region directory, or calibration YAML"),
    "bidders": lambda p: p.add_argument("--bidders", type=Path, help="bidders.csv"),
    "traces": lambda p: p.add_argument("--traces", type=Path, help="traces.csv or a directory of regions"),
    "out": lambda p: p.add_argument("--out", type=Path, help="Output directory"),
    "seed": lambda p: p.add_argument("--seed", type=int, help="Random seed"),
    "tol": lambda p: p.add_argument("--tol", type=float, help="Pacing tolerance"),
    "max-iter": lambda p: p.add_argument("--max-iter", type=int, help="Pacing iteration cap"),
    "method": lambda p: p.add_argument("--method", choices=METHODS, help="Pacing solver"),
    "oracle": lambda p: p.add_argument("--oracle", action="store_true", default=None, help="Use the enumeration engine"),
    "budget": lambda p: p.add_argument("--budget", type=float, help="Budget per mille"),
    "goal": lambda p: p.add_argument("--goal", type=float, help="Impression goal"),
    "inventory": lambda p: p.add_argument("--inventory", type=float, help="Projected impression opportunities"),
    "k": lambda p: p.add_argument("--k", type=int, help="Number of clusters"),
    "jobs": lambda p: p.add_argument("--jobs", type=int, help="Worker processes for several regions"),
    "delta": lambda p: p.add_argument("--delta", type=float, help="Classification tolerance"),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    setup_logger("paced_gsp", settings.log_file, settings.log_level, settings.log_dir)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        config = RunConfig.from_args(args)
        with overridden_settings(config.overrides()):
            return COMMANDS[config.command](config)
    except NonConvergenceError as e:
        logger.error(f"Did not converge: {e}")
        return 2
    except InvalidInputError as e:
        logger.error(f"Invalid input: {e}")
        return 1
    except Exception as e:
        logger.error(f"Execution failed: {str(e)}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
