"""
Region and cohort analysis over simulated outcomes
Run with: pytest tests/test_pipeline.py -v
"""

import datetime as dt
import json

import pytest

from conftest import START, make_trace
from paced_gsp.errors import InvalidInputError
from paced_gsp.io import (
    OUTCOME_COLUMNS,
    TRACE_COLUMNS,
    load_bidders,
    load_market_config,
    trace_rows,
    write_csv,
)
from paced_gsp.pipeline import CohortAnalysis, RegionAnalysis
from paced_gsp.regret import Classification
from paced_gsp.simulator import BidSchedule, simulate_region

DAYS = 10


def build_region(directory, recommended=7.0, simulate=True):
    """
    Agent ``a`` bids 7 then 8 against an opponent at 10 over a reserve of 5.

    Both bids sit on the same step, so every v in [5, 38] carries no
    regret and the agent is rationalized at the middle, 21.5.
    """
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "market.json").write_text(
        json.dumps({"reserve": 5.0, "page_views_thousands": 3.0, "region": {"base_daily_volume": 1000.0}})
    )
    end = START + dt.timedelta(days=DAYS - 1)
    switch = START + dt.timedelta(days=DAYS // 2)
    (directory / "bidders.csv").write_text(
        "agent_id,bid,monthly_budget,priority,start_date,end_date\n"
        f"o,10,1000000,1,{START},{end}\n"
        f"a,7,1000000,2,{START},{switch - dt.timedelta(days=1)}\n"
        f"a,8,1000000,2,{switch},{end}\n"
    )
    bids = [7.0] * (DAYS // 2) + [8.0] * (DAYS - DAYS // 2)
    write_csv(directory / "traces.csv", trace_rows([make_trace(bids, recommended=[recommended] * DAYS)]), TRACE_COLUMNS)

    if simulate:
        config = load_market_config(directory / "market.json")
        schedule = BidSchedule(row.to_interval() for row in load_bidders(directory / "bidders.csv"))
        run = simulate_region(config.region_config(), schedule)
        write_csv(directory / "outcomes.csv", run.outcome_rows(), OUTCOME_COLUMNS)
    return directory


@pytest.fixture
def region(tmp_path) -> RegionAnalysis:
    return RegionAnalysis.from_directory(build_region(tmp_path / "region_000"))


class TestRegionAnalysis:
    """One region"""

    def test_01_from_directory(self, region):
        """Traces, history and market come from the directory"""
        assert region.region_id == "region_000"
        assert [t.agent_id for t in region.traces] == ["a"]
        assert len(region.history) == DAYS
        assert region.config.reserve == 5.0

    def test_02_needs_simulated_outcomes(self, tmp_path):
        """A region that was never simulated cannot be analysed"""
        directory = build_region(tmp_path / "raw", simulate=False)
        with pytest.raises(InvalidInputError, match="simulate"):
            RegionAnalysis.from_directory(directory)

    def test_03_infer(self, region):
        """The agent is rationalized inside its regret-free range"""
        (report,) = region.infer()
        assert report.agent_id == "a"
        assert report.v_star == pytest.approx(21.5)
        assert report.eps_star == pytest.approx(0.0, abs=1e-9)
        assert report.days == DAYS

    def test_04_compare_equal(self, region):
        """Following a recommendation on the same step is no better"""
        (report,) = region.compare()
        assert report.classification is Classification.EQUAL

    def test_05_compare_worse_recommendation(self, tmp_path):
        """A recommendation above the opponent costs regret at v = 21.5"""
        analysis = RegionAnalysis.from_directory(build_region(tmp_path / "r", recommended=12.0))
        (report,) = analysis.compare()
        assert report.eps_reco > 0.0
        assert report.classification is Classification.BETTER

    def test_06_cluster_and_summary(self, region):
        """One eligible agent forms one flagged cluster"""
        clusters = region.cluster()
        assert clusters.assignments == {"a": 1}
        assert clusters.flagged
        summary = region.summarize(clusters)
        assert summary["agents"].tolist() == [1]

    def test_07_adherence(self, region):
        """The first day matches the recommendation, the change to 8 does not"""
        curve = region.adherence(region.cluster())
        assert curve.overall == pytest.approx((0.5,))
        assert curve.by_cluster[1] == pytest.approx((0.5,))

    def test_08_pipeline_info(self, region):
        """Counts, stages and artifacts"""
        info = region.get_pipeline_info()
        assert info["agents"] == 1 and info["eligible_agents"] == 1
        assert info["days"] == DAYS
        assert "report.csv" in info["output_files"]
        assert info["stages"] == ["infer", "compare", "cluster", "adherence"]

    def test_09_min_active_days_filters_inference(self, tmp_path):
        """Agents shorter-lived than the minimum are not inferred"""
        analysis = RegionAnalysis.from_directory(build_region(tmp_path / "r"), min_active_days=DAYS + 1)
        assert analysis.infer() == []


class TestCohortAnalysis:
    """Several regions pooled"""

    @pytest.fixture
    def cohort(self, tmp_path) -> CohortAnalysis:
        return CohortAnalysis(
            RegionAnalysis.from_directory(build_region(tmp_path / name)) for name in ("region_000", "region_001")
        )

    def test_01_qualified_ids(self, cohort):
        """Agent ids are prefixed with their region"""
        assert [t.agent_id for t in cohort.traces()] == ["region_000/a", "region_001/a"]

    def test_02_reports_carry_region(self, cohort):
        """Every report is tagged with the region it came from"""
        assert [region for region, _ in cohort.infer()] == ["region_000", "region_001"]

    def test_03_pooled_clusters(self, cohort):
        """Cluster labels follow the qualified ids"""
        clusters = cohort.cluster()
        assert cohort.pooled_assignments(clusters) == {"region_000/a": 1, "region_001/a": 1}
        curve = cohort.adherence(clusters)
        assert curve.agents == (2,)
        assert curve.overall == pytest.approx((0.5,))

    def test_04_histogram(self, cohort):
        """Compared reports all land in the histogram"""
        counts, _ = cohort.histogram([report for _, report in cohort.compare()], bins=5)
        assert counts.sum() == 2

    def test_05_info(self, cohort):
        """Totals over regions"""
        info = cohort.get_pipeline_info()
        assert info["regions"] == 2
        assert info["agents"] == 2

    def test_06_empty_cohort(self):
        """No regions is invalid input"""
        with pytest.raises(InvalidInputError):
            CohortAnalysis([])
