"""
Tests for league tables, forest data and the report writers.
"""
import json

import numpy as np
import pandas as pd
import pytest

from src.errors import ConfigError
from src.results.results_utils import (ReportBundle, build_bundle, check_formats, covratio_frame, flagged_frame,
                                       forest_data, league_table, lrt_frame, psiratio_frame, rank_changes,
                                       residual_frame, write_json, write_reports, write_tsv)


@pytest.fixture(scope="module")
def bundle(case_study, case_study_report):
    return build_bundle(case_study, case_study_report)


class TestLeagueTable:
    """Tests for the odds ratio grid."""

    def test_reciprocity(self, case_study, case_study_fit):
        table = league_table(case_study_fit, case_study)

        assert table.estimates.shape == (8, 8)
        assert np.allclose(np.diag(table.estimates), 1.0)
        assert np.allclose(table.estimates * table.estimates.T, 1.0, rtol=0, atol=1e-10)
        assert np.allclose(table.lower * table.upper.T, 1.0, rtol=0, atol=1e-10)

    def test_cell(self, case_study, case_study_fit):
        table = league_table(case_study_fit, case_study)
        estimate, se = case_study_fit.contrast(3, 0)

        odds_ratio, lower, upper = table.cell(3, 0)
        assert odds_ratio == pytest.approx(np.exp(estimate))
        assert lower == pytest.approx(np.exp(estimate - 1.959964 * se), rel=1e-6)
        assert upper == pytest.approx(np.exp(estimate + 1.959964 * se), rel=1e-6)

    def test_frame(self, case_study, case_study_fit):
        frame = league_table(case_study_fit, case_study).to_frame()

        assert frame.shape == (56, 5)
        assert list(frame.columns) == ["treatment", "versus", "odds_ratio", "lower", "upper"]

    def test_counts(self, case_study, case_study_fit):
        table = league_table(case_study_fit, case_study)

        assert table.num_trials == 26
        assert table.participants == 223313
        assert table.tau == pytest.approx(case_study_fit.tau)


class TestForest:
    """Tests for forest data and ranking."""

    def test_ranked_ascending(self, case_study, case_study_fit):
        forest = forest_data(case_study_fit, case_study)

        assert forest.shape[0] == 7
        assert list(forest["rank"]) == list(range(1, 8))
        assert forest["odds_ratio"].is_monotonic_increasing
        assert (forest["versus"] == "Placebo").all()
        assert set(forest["treatment"]) == {"AB", "ACEI", "ARB", "BB", "CCB", "CT", "DD"}

    def test_rank_changes(self):
        before = pd.DataFrame({"rank": [1, 2], "treatment": ["A", "B"], "odds_ratio": [0.5, 0.7]})
        after = pd.DataFrame({"rank": [1, 2], "treatment": ["B", "A"], "odds_ratio": [0.4, 0.6]})

        changes = rank_changes(before, after)

        assert list(changes["treatment"]) == ["A", "B"]
        assert list(changes["rank_change"]) == [1, -1]


class TestDiagnosticTables:
    """Ordering of the diagnostic tables."""

    def test_residuals_sorted_by_magnitude(self, case_study_report):
        frame = residual_frame(case_study_report)
        magnitude = frame["psi"].abs().dropna()

        assert frame.shape[0] == 28
        assert magnitude.is_monotonic_decreasing
        assert frame["psi"].isna().sum() == 1
        assert np.isnan(frame["psi"].iloc[-1])
        assert residual_frame(case_study_report, basic_only=False).shape[0] == 30

    def test_ratios_sorted_ascending(self, case_study_report):
        covratio = covratio_frame(case_study_report)
        psiratio = psiratio_frame(case_study_report)

        assert covratio["covratio"].dropna().is_monotonic_increasing
        assert psiratio["psiratio"].dropna().is_monotonic_increasing
        assert np.isnan(covratio["covratio"].iloc[-1])

    def test_flagged_criteria(self, case_study_report):
        frame = flagged_frame(case_study_report)

        assert frame["trial_id"].tolist() == [23, 24, 26]
        assert frame["flagged"].all()
        assert (frame["num_criteria"] == 2).all()
        assert frame["psi"].all() and frame["lrt"].all()
        assert not frame["covratio"].any() and not frame["psiratio"].any()

    def test_lrt_sorted_by_p_value(self, case_study_report):
        frame = lrt_frame(case_study_report)

        assert frame["chi2_p"].is_monotonic_increasing
        assert frame.shape[0] == 26


class TestWriters:
    """Tests for the TSV and JSON writers."""

    def test_formats(self):
        assert check_formats(["TSV", " json "]) == ["tsv", "json"]
        with pytest.raises(ConfigError):
            check_formats(["xml"])
        with pytest.raises(ConfigError):
            check_formats([])

    def test_json_null_and_types(self, tmp_path):
        bundle = ReportBundle(tables={"t": pd.DataFrame({"a": [1.5, np.nan], "b": [np.int64(2), np.int64(3)],
                                                         "c": [True, False]})},
                              summary={"tau": np.float64(0.1), "missing": None, "ids": [np.int64(1)]})

        content = json.loads(open(write_json(bundle, tmp_path)).read())

        assert content["summary"] == {"tau": 0.1, "missing": None, "ids": [1]}
        assert content["tables"]["t"] == [{"a": 1.5, "b": 2, "c": True}, {"a": None, "b": 3, "c": False}]

    def test_json_deterministic(self, bundle, tmp_path):
        first = open(write_json(bundle, tmp_path / "a")).read()
        second = open(write_json(bundle, tmp_path / "b")).read()

        assert first == second

    def test_tsv_matches_json(self, bundle, tmp_path):
        write_reports(bundle, tmp_path, formats=["tsv", "json"])

        content = json.loads((tmp_path / "report.json").read_text())
        forest = pd.read_csv(tmp_path / "forest.tsv", sep="\t")

        assert list(forest.columns) == list(content["tables"]["forest"][0].keys())
        for row, record in zip(forest.itertuples(index=False), content["tables"]["forest"]):
            assert row.treatment == record["treatment"]
            assert row.odds_ratio == pytest.approx(record["odds_ratio"], rel=1e-5)

    def test_tsv_files(self, bundle, tmp_path):
        paths = write_tsv(bundle, tmp_path)
        names = sorted(path.split("/")[-1] for path in paths)

        assert "summary.tsv" in names
        assert "league_table.tsv" in names
        summary = pd.read_csv(tmp_path / "summary.tsv", sep="\t", keep_default_na=False)
        assert summary.loc[summary["key"] == "num_trials", "value"].iloc[0] == "26"
