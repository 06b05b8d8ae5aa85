"""Exact one-dimensional k-means of agents by bid-change frequency."""

from __future__ import annotations

import itertools
import logging
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from paced_gsp.config.settings import settings
from paced_gsp.errors import InvalidInputError
from paced_gsp.market import BidTrace

logger = logging.getLogger(__name__)


class ClusterResult(BaseModel):
    """
    Cluster labels run 1..k from the lowest-frequency centre upward.

    ``flagged`` is set when fewer distinct frequencies than requested
    clusters survived filtering; ``k`` is then the number actually formed.
    """

    model_config = ConfigDict(frozen=True)

    assignments: dict[str, int]
    centers: tuple[float, ...]
    within_ss: float
    k: int
    requested_k: int
    flagged: bool = False
    excluded: tuple[str, ...] = ()

    def members(self, label: int) -> list[str]:
        return sorted(a for a, c in self.assignments.items() if c == label)


def _segment_costs(values: np.ndarray) -> np.ndarray:
    """cost[i, j] = sum of squares of values[i:j] about their mean, j > i."""
    n = values.size
    prefix = np.concatenate(([0.0], np.cumsum(values)))
    prefix_sq = np.concatenate(([0.0], np.cumsum(values * values)))
    cost = np.full((n + 1, n + 1), np.inf)
    for i in range(n):
        j = np.arange(i + 1, n + 1)
        total = prefix[j] - prefix[i]
        cost[i, i + 1:] = np.maximum(prefix_sq[j] - prefix_sq[i] - total * total / (j - i), 0.0)
    return cost


def kmeans_1d(values: Sequence[float], k: int) -> tuple[np.ndarray, np.ndarray, float]:
    """
    Optimal k-means of 1-D data by dynamic programming over split points.

    Returns (labels 0..k-1 aligned with ``values``, centres ascending, within-cluster SS).
    """
    data = np.asarray(values, dtype=float)
    n = data.size
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(data, kind="stable")
    ordered = data[order]
    cost = _segment_costs(ordered)

    best = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=int)
    best[0, 0] = 0.0
    for c in range(1, k + 1):
        for m in range(c, n + 1):
            candidates = best[c - 1, c - 1:m] + cost[c - 1:m, m]
            s = int(np.argmin(candidates))
            best[c, m] = candidates[s]
            split[c, m] = s + c - 1

    bounds = [n]
    for c in range(k, 0, -1):
        bounds.append(split[c, bounds[-1]])
    bounds.reverse()

    sorted_labels = np.zeros(n, dtype=int)
    centers = np.zeros(k)
    for c in range(k):
        lo, hi = bounds[c], bounds[c + 1]
        sorted_labels[lo:hi] = c
        centers[c] = ordered[lo:hi].mean()
    labels = np.empty(n, dtype=int)
    labels[order] = sorted_labels
    return labels, centers, float(best[k, n])


def brute_force_kmeans(values: Sequence[float], k: int) -> float:
    """Smallest within-cluster SS over every labelling into exactly k non-empty clusters."""
    data = np.asarray(values, dtype=float)
    best = np.inf
    for labels in itertools.product(range(k), repeat=data.size):
        labels = np.asarray(labels)
        if np.unique(labels).size != k:
            continue
        total = sum(float(np.sum((data[labels == c] - data[labels == c].mean()) ** 2)) for c in range(k))
        best = min(best, total)
    return best


def eligible_for_clustering(trace: BidTrace, min_active_days: Optional[int] = None) -> bool:
    min_active_days = settings.min_active_days if min_active_days is None else min_active_days
    return trace.active_duration >= min_active_days and trace.bid_change_count > 0


def cluster_by_frequency(
    traces: Iterable[BidTrace],
    k: Optional[int] = None,
    min_active_days: Optional[int] = None,
) -> ClusterResult:
    """
    Partition agents by bid-change frequency into k clusters.

    Agents active for fewer than ``min_active_days`` days or never changing
    their bid are left out first.

    Raises:
        InvalidInputError: no agent survives filtering.
    """
    k = settings.cluster_k if k is None else k
    traces = list(traces)
    kept = [t for t in traces if eligible_for_clustering(t, min_active_days)]
    kept_ids = {t.agent_id for t in kept}
    excluded = tuple(sorted(t.agent_id for t in traces if t.agent_id not in kept_ids))
    if not kept:
        raise InvalidInputError("no agent left to cluster after filtering short-lived and fixed bidders")

    frequencies = np.array([t.bid_change_frequency for t in kept])
    distinct = np.unique(frequencies).size
    formed = min(k, distinct)
    if formed < k:
        logger.warning(f"Only {distinct} distinct bid-change frequencies; forming {formed} cluster(s) instead of {k}")

    labels, centers, within_ss = kmeans_1d(frequencies, formed)
    assignments = {t.agent_id: int(label) + 1 for t, label in zip(kept, labels)}
    logger.info(
        f"Clustered {len(kept)} agents into {formed} groups",
        extra={"excluded": len(excluded), "centers": centers.tolist()},
    )
    return ClusterResult(
        assignments=assignments,
        centers=tuple(centers.tolist()),
        within_ss=within_ss,
        k=formed,
        requested_k=k,
        flagged=formed < k,
        excluded=excluded,
    )


def cluster_summary(result: ClusterResult, traces: Iterable[BidTrace]) -> pd.DataFrame:
    """Per-cluster agent count and mean frequency, active duration and bid."""
    by_id = {t.agent_id: t for t in traces}
    frame = pd.DataFrame(
        [
            {
                "cluster": label,
                "agent_id": agent_id,
                "frequency": by_id[agent_id].bid_change_frequency,
                "active_duration": by_id[agent_id].active_duration,
                "mean_bid": float(np.mean([r.bid for r in by_id[agent_id].active_records])),
            }
            for agent_id, label in result.assignments.items()
        ]
    )
    summary = frame.groupby("cluster").agg(
        agents=("agent_id", "count"),
        mean_frequency=("frequency", "mean"),
        mean_active_duration=("active_duration", "mean"),
        mean_bid=("mean_bid", "mean"),
    )
    return summary.reset_index()
