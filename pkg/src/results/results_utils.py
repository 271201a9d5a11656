#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Report tables built from fits and diagnostics, and their TSV / JSON writers.

All tables are pandas DataFrames with a fixed column order and deterministic row order, so identical inputs give
byte-identical files.
"""
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from src.errors import ConfigError
from src.data_processing.data_loading_utils import NetworkData
from src.models.model import ModelFit
from src.results.diagnostics import CRITERIA, DiagnosticReport

FORMATS = ["tsv", "json"]
TSV_FLOAT_FORMAT = "%.6g"


# ---------------------------------------------------------------------------------------
"League table and forest data"


@dataclass
class LeagueTable:
    """
    Odds ratios of every treatment pair.

    - labels: treatment labels, index 0 is the reference.
    - estimates, lower, upper: arrays of shape (p + 1, p + 1); cell (a, b) is the OR of a vs b with Wald interval.
    - tau: heterogeneity SD of the fit.
    """
    labels: List[str]
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tau: float
    num_trials: int
    participants: float

    def cell(self, treatment_a: int, treatment_b: int):
        return self.estimates[treatment_a, treatment_b], self.lower[treatment_a, treatment_b], \
               self.upper[treatment_a, treatment_b]

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per ordered pair (a, b), a != b."""
        rows = []
        for a, label_a in enumerate(self.labels):
            for b, label_b in enumerate(self.labels):
                if a != b:
                    rows.append({"treatment": label_a, "versus": label_b, "odds_ratio": self.estimates[a, b],
                                 "lower": self.lower[a, b], "upper": self.upper[a, b]})
        return pd.DataFrame(rows, columns=["treatment", "versus", "odds_ratio", "lower", "upper"])


def league_table(fit: ModelFit, network: NetworkData, level: float = 0.95) -> LeagueTable:
    """
    Compute the league table of a fit: exp(mu_a - mu_b) with Wald interval exp(est +- z SE).

    Params:
    - fit: ModelFit object.
    - network: NetworkData the fit was computed on (labels and counts).
    - level: confidence level.
    """
    size = fit.num_treatments + 1
    estimates, lower, upper = np.ones((size, size)), np.ones((size, size)), np.ones((size, size))
    z = norm.ppf(0.5 + level / 2)

    for a in range(size):
        for b in range(size):
            if a == b:
                continue
            estimate, se = fit.contrast(a, b)
            estimates[a, b] = np.exp(estimate)
            lower[a, b], upper[a, b] = np.exp(estimate - z * se), np.exp(estimate + z * se)

    return LeagueTable(labels=[treatment.label for treatment in network.treatments], estimates=estimates,
                       lower=lower, upper=upper, tau=fit.tau, num_trials=len(network.trials),
                       participants=network.total_participants)


def forest_data(fit: ModelFit, network: NetworkData, level: float = 0.95) -> pd.DataFrame:
    """
    Odds ratio of every treatment vs the reference, ranked by point estimate (ascending: fewest events first).
    """
    table = league_table(fit, network, level=level)
    rows = [{"treatment": table.labels[t], "versus": table.labels[0], "odds_ratio": table.estimates[t, 0],
             "lower": table.lower[t, 0], "upper": table.upper[t, 0]} for t in range(1, len(table.labels))]

    frame = pd.DataFrame(rows, columns=["treatment", "versus", "odds_ratio", "lower", "upper"])
    frame = frame.sort_values(["odds_ratio", "treatment"], kind="mergesort").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, frame.shape[0] + 1))

    return frame


def rank_changes(before: pd.DataFrame, after: pd.DataFrame) -> pd.DataFrame:
    """Join two forest tables by treatment and report rank and OR changes."""
    merged = before[["treatment", "rank", "odds_ratio"]].merge(after[["treatment", "rank", "odds_ratio"]],
                                                               on="treatment", suffixes=("_all", "_reduced"))
    merged["rank_change"] = merged["rank_reduced"] - merged["rank_all"]
    return merged.sort_values(["rank_all", "treatment"], kind="mergesort").reset_index(drop=True)


# ---------------------------------------------------------------------------------------
"Diagnostic tables"


def residual_frame(report: DiagnosticReport, basic_only: bool = True) -> pd.DataFrame:
    """Residual records sorted by |psi| (largest first; not computable last)."""
    rows = [{"trial_id": r.trial_id, "study": r.label, "comparison": r.comparison_label, "basic": r.basic,
             "phi": r.phi, "psi": r.psi, "boot_lo": r.boot_lo, "boot_hi": r.boot_hi,
             "exceeds_normal": r.exceeds_normal, "exceeds_both": r.exceeds_both, "flagged": r.flagged,
             "computable": r.computable}
            for r in report.residuals if r.basic or not basic_only]

    frame = pd.DataFrame(rows, columns=["trial_id", "study", "comparison", "basic", "phi", "psi", "boot_lo", "boot_hi",
                                        "exceeds_normal", "exceeds_both", "flagged", "computable"])
    frame["_key"] = -frame["psi"].abs().fillna(-np.inf)
    frame = frame.sort_values(["_key", "trial_id", "comparison"], kind="mergesort").drop(columns="_key")

    return frame.reset_index(drop=True)


def _influence_rows(report: DiagnosticReport) -> pd.DataFrame:
    rows = [{"trial_id": r.trial_id, "study": r.label, "covratio": r.covratio, "covratio_p05": r.covratio_p05,
             "covratio_flagged": r.covratio_flagged, "psiratio": r.psiratio, "psiratio_p05": r.psiratio_p05,
             "psiratio_flagged": r.psiratio_flagged, "tau2_loo": r.tau2_loo, "lrt": r.lrt, "df": r.df,
             "chi2_p": r.chi2_p, "lrt_p95": r.lrt_p95, "boot_p": r.boot_p, "lrt_flagged": r.lrt_flagged,
             "mvr_norm2": r.mvr_norm2, "mvr_p": r.mvr_p, "computable": r.computable}
            for r in report.influence]
    return pd.DataFrame(rows)


def covratio_frame(report: DiagnosticReport) -> pd.DataFrame:
    """COVRATIO records sorted ascending."""
    frame = _influence_rows(report)[["trial_id", "study", "covratio", "covratio_p05", "covratio_flagged",
                                     "computable"]]
    return frame.sort_values(["covratio", "trial_id"], kind="mergesort", na_position="last").reset_index(drop=True)


def psiratio_frame(report: DiagnosticReport) -> pd.DataFrame:
    """PSIRATIO records sorted ascending, undefined values last."""
    frame = _influence_rows(report)[["trial_id", "study", "psiratio", "tau2_loo", "psiratio_p05", "psiratio_flagged",
                                     "computable"]]
    frame["psiratio"] = frame["psiratio"].astype(float)
    return frame.sort_values(["psiratio", "trial_id"], kind="mergesort", na_position="last").reset_index(drop=True)


def lrt_frame(report: DiagnosticReport) -> pd.DataFrame:
    """Mean-shift test records sorted by bootstrap p-value (chi2 p-value without bootstrap), then largest T."""
    frame = _influence_rows(report)[["trial_id", "study", "lrt", "df", "chi2_p", "lrt_p95", "boot_p", "lrt_flagged",
                                     "mvr_norm2", "mvr_p"]]
    frame["_p"] = frame["boot_p"].astype(float).fillna(frame["chi2_p"]) if report.replicates > 0 else frame["chi2_p"]
    frame["_t"] = -frame["lrt"]
    frame = frame.sort_values(["_p", "_t", "trial_id"], kind="mergesort").drop(columns=["_p", "_t"])

    return frame.reset_index(drop=True)


def flagged_frame(report: DiagnosticReport) -> pd.DataFrame:
    """One row per trial flagged by any criterion, with the criteria and whether they reach the consensus count."""
    flagged = set(report.flagged_trials)
    rows = []
    for r in report.influence:
        criteria = report.criteria(r.trial_id)
        if not criteria:
            continue
        rows.append({"trial_id": r.trial_id, "study": r.label, **{name: name in criteria for name in CRITERIA},
                     "num_criteria": len(criteria), "flagged": r.trial_id in flagged})

    return pd.DataFrame(rows, columns=["trial_id", "study", *CRITERIA, "num_criteria", "flagged"])


def network_frame(network: NetworkData) -> pd.DataFrame:
    """Per treatment number of trials and participants (real arms only)."""
    rows = []
    for treatment in network.treatments:
        arms = [arm for trial in network.raw_trials for arm in trial.real_arms if arm.treatment.id == treatment.id]
        rows.append({"treatment_id": treatment.id, "treatment": treatment.label, "trials": len(arms),
                     "participants": float(sum(arm.size for arm in arms))})
    return pd.DataFrame(rows, columns=["treatment_id", "treatment", "trials", "participants"])


def fit_summary(fit: ModelFit, prefix: str) -> dict:
    return {f"{prefix}_tau": fit.tau, f"{prefix}_tau2": fit.tau2, f"{prefix}_loglik": fit.loglik,
            f"{prefix}_converged": fit.converged, f"{prefix}_at_upper_bound": fit.at_upper_bound,
            f"{prefix}_iterations": fit.iterations}


# ---------------------------------------------------------------------------------------
"Report bundle and writers"


@dataclass
class ReportBundle:
    """Named tables and a flat summary dictionary. TSV and JSON outputs are written from the same object."""
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"summary": _to_builtin(self.summary),
                "tables": {name: _frame_records(frame) for name, frame in self.tables.items()}}


def _to_builtin(value):
    """Convert numpy scalars/arrays to built-in types and NaN/inf to None."""
    if isinstance(value, dict):
        return {str(key): _to_builtin(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_to_builtin(item) for item in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if value is None or isinstance(value, str):
        return value
    if pd.isna(value):
        return None
    return str(value)


def _frame_records(frame: pd.DataFrame) -> List[dict]:
    return [{column: _to_builtin(value) for column, value in zip(frame.columns, row)}
            for row in frame.itertuples(index=False, name=None)]


def check_formats(formats: Sequence[str]) -> List[str]:
    formats = [fmt.strip().lower() for fmt in formats if fmt.strip() != ""]
    unknown = [fmt for fmt in formats if fmt not in FORMATS]
    if unknown or not formats:
        raise ConfigError(f"Output formats must be a non-empty subset of {FORMATS}. Got {formats}.")
    return formats


def write_tsv(bundle: ReportBundle, save_fd: str) -> List[str]:
    """One TSV per table plus summary.tsv (key / value). Floats with 6 significant digits."""
    os.makedirs(save_fd, exist_ok=True)
    paths = []

    for name, frame in bundle.tables.items():
        path = os.path.join(save_fd, f"{name}.tsv")
        frame.to_csv(path, sep="\t", index=False, float_format=TSV_FLOAT_FORMAT, na_rep="NA", lineterminator="\n")
        paths.append(path)

    summary = pd.DataFrame([{"key": key, "value": _summary_value(value)} for key, value in bundle.summary.items()],
                           columns=["key", "value"])
    path = os.path.join(save_fd, "summary.tsv")
    summary.to_csv(path, sep="\t", index=False, na_rep="NA", lineterminator="\n")
    paths.append(path)

    return paths


def _summary_value(value) -> str:
    value = _to_builtin(value)
    if value is None:
        return "NA"
    if isinstance(value, float):
        return TSV_FLOAT_FORMAT % value
    if isinstance(value, list):
        return ",".join(str(item) for item in value)
    return str(value)


def write_json(bundle: ReportBundle, save_fd: str, name: str = "report.json") -> str:
    """Full precision JSON, NaN written as null, fixed key order."""
    os.makedirs(save_fd, exist_ok=True)
    path = os.path.join(save_fd, name)

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(bundle.to_dict(), f, indent=2, allow_nan=False)
        f.write("\n")

    return path


def write_reports(bundle: ReportBundle, save_fd: str, formats: Sequence[str] = ("tsv", "json")) -> List[str]:
    paths = []
    for fmt in check_formats(formats):
        if fmt == "tsv":
            paths.extend(write_tsv(bundle, save_fd))
        elif fmt == "json":
            paths.append(write_json(bundle, save_fd))
    return paths


def build_bundle(network: NetworkData, report: DiagnosticReport, observed: Optional[pd.DataFrame] = None,
                 all_comparisons: bool = False, reference_label: Optional[str] = None) -> ReportBundle:
    """
    Assemble model summary, league table, forest data and the diagnostic tables of one analysis.
    """
    table = league_table(report.fit, network)
    flagged = report.flagged_trials

    summary = {"reference": network.treatments[0].label if reference_label is None else reference_label,
               "num_trials": len(network.trials), "num_treatments": len(network.treatments),
               "total_participants": network.total_participants,
               "corrected_trials": [trial.label for trial in network.trials if trial.corrected],
               "augmented_trials": [trial.label for trial in network.trials if trial.augmented],
               **fit_summary(report.ml_fit, "ml"), **fit_summary(report.fit, report.fit.method.lower()),
               "bootstrap_replicates": report.replicates,
               "bootstrap_failures": int(sum(report.failures.values())),
               "flagged_trial_ids": flagged,
               "flagged_trials": [network.label(trial_id) for trial_id in flagged]}

    tables = {"league_table": table.to_frame(), "forest": forest_data(report.fit, network),
              "network": network_frame(network), "residuals": residual_frame(report, basic_only=not all_comparisons),
              "covratio": covratio_frame(report), "psiratio": psiratio_frame(report), "lrt": lrt_frame(report),
              "flagged": flagged_frame(report)}
    if observed is not None:
        tables["observed_effects"] = observed

    return ReportBundle(tables=tables, summary=summary)
