"""
Analysis stages over simulated regions.

A region directory holds market.json, traces.csv and the outcomes.csv the
simulator wrote next to them. ``RegionAnalysis`` runs the downstream
stages on one region; ``CohortAnalysis`` pools several regions, keeping
agent ids unique by prefixing the region name.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from paced_gsp.clustering import ClusterResult, cluster_by_frequency, cluster_summary, eligible_for_clustering
from paced_gsp.config.settings import settings
from paced_gsp.errors import InvalidInputError
from paced_gsp.io import MARKET_FILE, MarketConfig, load_history, load_market_config, load_traces
from paced_gsp.market import BidTrace
from paced_gsp.regret import (
    AdherenceCurve,
    MarketDay,
    RegretGridConfig,
    RegretReport,
    adherence_curve,
    compare_with_recommendation,
    infer_agent,
    regret_difference_histogram,
)

logger = logging.getLogger(__name__)

OUTCOMES_FILE = "outcomes.csv"
TRACES_FILE = "traces.csv"


# ============================================
# ONE REGION
# ============================================

class RegionAnalysis:
    """
    Inference, recommendation comparison, clustering and adherence for one region.

    Stages:
    - infer: minimum-regret value of every eligible agent
    - compare: own regret against always following the recommendation
    - cluster: 1-D k-means on bid-change frequency
    - adherence: fraction of bid changes matching the recommendation by tenure month

    Eligible agents are those clustering keeps: active for at least
    ``min_active_days`` and changing their bid at least once.
    """

    def __init__(
        self,
        region_id: str,
        config: MarketConfig,
        traces: Iterable[BidTrace],
        history: Iterable[MarketDay],
        k: Optional[int] = None,
        min_active_days: Optional[int] = None,
        delta: Optional[float] = None,
        grid: Optional[RegretGridConfig] = None,
    ):
        self.region_id = region_id
        self.config = config
        self.traces = list(traces)
        self.history = {day.date: day for day in history}
        self.k = settings.cluster_k if k is None else k
        self.min_active_days = settings.min_active_days if min_active_days is None else min_active_days
        self.delta = settings.classification_delta if delta is None else delta
        self.grid = grid or RegretGridConfig()

    @classmethod
    def from_directory(
        cls,
        directory: str | Path,
        traces_path: Optional[str | Path] = None,
        market_path: Optional[str | Path] = None,
        **options,
    ) -> RegionAnalysis:
        directory = Path(directory)
        traces_path = Path(traces_path) if traces_path else directory / TRACES_FILE
        outcomes_path = traces_path.parent / OUTCOMES_FILE
        if not outcomes_path.is_file():
            raise InvalidInputError(
                f"{outcomes_path}: no simulator outcomes beside {traces_path.name}; run `simulate` first"
            )
        config = load_market_config(market_path or traces_path.parent / MARKET_FILE)
        return cls(
            directory.name,
            config,
            load_traces(traces_path),
            load_history(outcomes_path, config),
            **options,
        )

    # ============================================
    # STAGES
    # ============================================

    def eligible_traces(self) -> list[BidTrace]:
        return [t for t in self.traces if eligible_for_clustering(t, self.min_active_days)]

    def infer(self) -> list[RegretReport]:
        eligible = self.eligible_traces()
        logger.info(f"[{self.region_id}] inferring values for {len(eligible)} of {len(self.traces)} agents")
        return [infer_agent(trace, self.history, self.grid) for trace in eligible]

    def compare(self) -> list[RegretReport]:
        eligible = self.eligible_traces()
        logger.info(f"[{self.region_id}] comparing {len(eligible)} agents with their recommendations")
        return [compare_with_recommendation(trace, self.history, self.delta, self.grid) for trace in eligible]

    def cluster(self) -> ClusterResult:
        return cluster_by_frequency(self.traces, self.k, self.min_active_days)

    def summarize(self, clusters: ClusterResult) -> pd.DataFrame:
        return cluster_summary(clusters, self.traces)

    def adherence(self, clusters: Optional[ClusterResult] = None) -> AdherenceCurve:
        return adherence_curve(self.traces, clusters.assignments if clusters else None)

    def get_pipeline_info(self) -> dict:
        """Region size and the stages and artifacts this analysis produces."""
        return {
            "region": self.region_id,
            "agents": len(self.traces),
            "eligible_agents": len(self.eligible_traces()),
            "days": len(self.history),
            "reserve": self.config.reserve,
            "stages": ["infer", "compare", "cluster", "adherence"],
            "output_files": [
                "report.csv",
                "regret_histogram.csv",
                "adherence.csv",
                "clusters.csv",
                "cluster_summary.csv",
            ],
        }


# ============================================
# SEVERAL REGIONS
# ============================================

class CohortAnalysis:
    """Regions analysed together; clusters are formed inside each region, then pooled."""

    def __init__(self, regions: Iterable[RegionAnalysis]):
        self.regions = list(regions)
        if not self.regions:
            raise InvalidInputError("no regions to analyse")

    @staticmethod
    def qualified(region: RegionAnalysis, agent_id: str) -> str:
        return f"{region.region_id}/{agent_id}"

    def traces(self) -> list[BidTrace]:
        return [
            trace.model_copy(update={"agent_id": self.qualified(region, trace.agent_id)})
            for region in self.regions
            for trace in region.traces
        ]

    def infer(self) -> list[tuple[str, RegretReport]]:
        return [(region.region_id, report) for region in self.regions for report in region.infer()]

    def compare(self) -> list[tuple[str, RegretReport]]:
        return [(region.region_id, report) for region in self.regions for report in region.compare()]

    def cluster(self) -> dict[str, ClusterResult]:
        results = {}
        for region in self.regions:
            try:
                results[region.region_id] = region.cluster()
            except InvalidInputError as exc:
                logger.warning(f"[{region.region_id}] skipped in clustering: {exc}")
        return results

    def pooled_assignments(self, clusters: dict[str, ClusterResult]) -> dict[str, int]:
        by_id = {region.region_id: region for region in self.regions}
        return {
            self.qualified(by_id[region_id], agent_id): label
            for region_id, result in clusters.items()
            for agent_id, label in result.assignments.items()
        }

    def adherence(self, clusters: Optional[dict[str, ClusterResult]] = None) -> AdherenceCurve:
        assignments = self.pooled_assignments(clusters) if clusters else None
        return adherence_curve(self.traces(), assignments)

    @staticmethod
    def histogram(reports: Iterable[RegretReport], bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return regret_difference_histogram(reports, bins)

    def get_pipeline_info(self) -> dict:
        infos = [region.get_pipeline_info() for region in self.regions]
        return {
            "regions": len(infos),
            "agents": sum(i["agents"] for i in infos),
            "eligible_agents": sum(i["eligible_agents"] for i in infos),
            "stages": infos[0]["stages"],
            "output_files": infos[0]["output_files"],
        }
