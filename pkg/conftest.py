"""
Shared fixtures: the antihypertensive case study and small synthetic networks.
"""
import io
import os
import sys

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

ROOT = os.path.dirname(os.path.abspath(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.data_processing.data_loader import data_loader  # noqa: E402
from src.data_processing.data_loading_utils import NetworkData, prepare_trials  # noqa: E402
from src.data_processing.trials import TrialFormat, parse_trials, treatments_of  # noqa: E402
from src.models.model import fit_model  # noqa: E402
from src.results.diagnostics import diagnose  # noqa: E402

CASE_STUDY_PATH = os.path.join(ROOT, "data", "antihypertensive", "heart_failure_trials.csv")

# Two-arm trials of one drug against placebo: (drug events, drug size, placebo events, placebo size)
PAIRWISE_COUNTS = [(10, 100, 20, 100), (15, 120, 12, 118), (30, 200, 45, 210), (8, 90, 25, 95),
                   (22, 150, 20, 140), (40, 300, 38, 310), (12, 80, 30, 85)]


def univariate_oracle(y, v, method="REML"):
    """Random-effects meta-analysis of one contrast by direct maximisation on the tau2 scale. Returns tau2, mu, var."""
    y, v = np.asarray(y, dtype=float), np.asarray(v, dtype=float)

    def negative(tau2):
        w = 1 / (v + tau2)
        mu = np.sum(w * y) / np.sum(w)
        value = 0.5 * np.sum(np.log(v + tau2)) + 0.5 * np.sum(w * (y - mu) ** 2)
        if method == "REML":
            value += 0.5 * np.log(np.sum(w))
        return value

    tau2 = minimize_scalar(negative, bounds=(0, 10), method="bounded", options={"xatol": 1e-13}).x
    w = 1 / (v + tau2)
    return tau2, np.sum(w * y) / np.sum(w), 1 / np.sum(w)


def build_network(rows, reference="Placebo", reference_policy="lowest_index") -> NetworkData:
    """
    NetworkData from (trial id, study, treatment, events, size) rows, without touching the file system.
    """
    lines = ["id,study,year,treatment,events,size"]
    lines += [f"{trial_id},{study},2000,{treatment},{events},{size}" for trial_id, study, treatment, events, size
              in rows]

    fmt = TrialFormat(reference=reference)
    trials = parse_trials(io.StringIO("\n".join(lines) + "\n"), fmt)
    coding = treatments_of(trials, fmt)
    processed, contrasts = prepare_trials(trials, coding)

    return NetworkData(treatments=coding, raw_trials=tuple(trials), trials=tuple(processed),
                       contrasts=tuple(contrasts), reference_policy=reference_policy)


def pairwise_rows(counts=PAIRWISE_COUNTS, drug_first=True):
    rows = []
    for k, (d_drug, n_drug, d_placebo, n_placebo) in enumerate(counts, start=1):
        arms = [("Drug", d_drug, n_drug), ("Placebo", d_placebo, n_placebo)]
        if not drug_first:
            arms = arms[::-1]
        rows += [(k, f"Trial-{k}", treatment, events, size) for treatment, events, size in arms]
    return rows


@pytest.fixture(scope="session")
def case_study():
    return data_loader(input_path=CASE_STUDY_PATH)


@pytest.fixture(scope="session")
def case_study_fit(case_study):
    return fit_model(case_study.contrasts, num_treatments=case_study.num_treatments)


@pytest.fixture(scope="session")
def pairwise_network():
    return build_network(pairwise_rows())


@pytest.fixture
def small_network():
    """Four treatments, one three-arm trial, one trial without placebo."""
    rows = [(1, "A1", "Placebo", 20, 200), (1, "A1", "X", 12, 198),
            (2, "A2", "Placebo", 35, 300), (2, "A2", "Y", 25, 305),
            (3, "A3", "X", 18, 250), (3, "A3", "Y", 14, 245), (3, "A3", "Placebo", 30, 251),
            (4, "A4", "Y", 9, 150), (4, "A4", "Z", 16, 149),
            (5, "A5", "Placebo", 40, 400), (5, "A5", "Z", 30, 402),
            (6, "A6", "X", 22, 310), (6, "A6", "Placebo", 33, 300)]
    return build_network(rows)


@pytest.fixture(scope="session")
def case_study_report(case_study):
    """Diagnostics of the case study without bootstrap calibration."""
    return diagnose(case_study)
