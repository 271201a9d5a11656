#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Outlier and influence measures for the network meta-analysis model.

Every trial is diagnosed in the coding of its temporary reference (one of its own arms), so that each residual is a
head-to-head comparison and pseudo reference arms never enter a residual. A comparison of a trial is written "A vs B"
in input arm order and its residual is that of the log odds ratio of B relative to A.

Measures:
    - phi: naive studentized residual, V = W_i^{-1} - V[mu_hat].
    - psi: leave-one-trial-out studentized residual, V = (W_i^{(-i)})^{-1} + V[mu_hat^{(-i)}].
    - multivariate residual R_i = V^{-1/2}(y_i - X_i mu_hat).
    - COVRATIO_i = det V[mu_hat^{(-i)}] / det V[mu_hat].
    - PSIRATIO_i = det Psi^{(-i)} / det Psi = (tau2^{(-i)} / tau2)^p.
    - T_i: likelihood ratio statistic of the mean-shift model for trial i (ML fits), chi2 with q_i df.
"""
import itertools
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import chi2

from src.errors import NumericalError
from src.data_processing.contrasts import ContrastData, rebase_matrix, transform_contrasts, trial_odds_ratio
from src.data_processing.data_loading_utils import NetworkData
from src.models.model import ModelFit, MeanShiftFit, fit_model, fit_mean_shift, fit_options as get_fit_options
from src.models.model_utils import RotatedContrasts, correlation_matrix, inverse_sqrt, spd_logdet

NORMAL_CRITICAL = 1.96
CHI2_LEVEL = 0.95
CRITERIA = ("psi", "covratio", "psiratio", "lrt")
# Criteria that must agree before a trial enters the flagged list
CONSENSUS = 2
# Round-off allowed when the mean-shift log-likelihood falls below the null one
LOGLIK_TOL = 1e-8


# ---------------------------------------------------------------------------------------
"Records"


@dataclass(frozen=True)
class Comparison:
    """Pair of arms of one trial. 'vector' picks log OR(b vs a) out of the trial's re-based contrasts."""
    treatment_a: int
    treatment_b: int
    label: str
    basic: bool
    vector: np.ndarray


@dataclass
class ResidualRecord:
    """
    Studentized residuals of one comparison of one trial.

    - comparison: (treatment_a, treatment_b) ids; comparison_label e.g. "ARB vs CT".
    - basic: True if the comparison involves the trial's temporary reference.
    - phi / psi: naive and leave-one-trial-out residuals (NaN if not computable).
    - boot_lo / boot_hi: 2.5th and 97.5th bootstrap percentiles of psi.
    - flagged: |psi| > 1.96 or psi outside its bootstrap interval.
    - exceeds_both: |psi| > 1.96 and outside the bootstrap interval.
    """
    trial_id: int
    label: str
    comparison: Tuple[int, int]
    comparison_label: str
    basic: bool
    phi: float
    psi: float
    computable: bool = True
    boot_lo: Optional[float] = None
    boot_hi: Optional[float] = None
    flagged: bool = False
    exceeds_both: bool = False

    @property
    def exceeds_normal(self) -> bool:
        return bool(self.computable and abs(self.psi) > NORMAL_CRITICAL)


@dataclass
class TrialInfluenceRecord:
    """
    Trial level influence measures.

    - covratio, psiratio: NaN when the leave-one-out fit is not computable; psiratio is None when tau2_hat is 0.
    - lrt, df, chi2_p: mean-shift likelihood ratio statistic, q_i and chi2 upper tail probability.
    - mvr_norm2, mvr_p: squared norm of the multivariate residual and its chi2 p-value.
    - bootstrap fields: 5th percentiles of COVRATIO and PSIRATIO, 95th percentile of T and its bootstrap p-value.
    """
    trial_id: int
    label: str
    covratio: float
    psiratio: Optional[float]
    lrt: float
    df: int
    chi2_p: float
    computable: bool = True
    tau2_loo: float = np.nan
    mvr_norm2: float = np.nan
    mvr_p: float = np.nan
    covratio_p05: Optional[float] = None
    psiratio_p05: Optional[float] = None
    lrt_p95: Optional[float] = None
    boot_p: Optional[float] = None
    covratio_flagged: bool = False
    psiratio_flagged: bool = False
    lrt_flagged: bool = False

    @property
    def lrt_exceeds_chi2(self) -> bool:
        return bool(self.lrt > chi2.ppf(CHI2_LEVEL, self.df))


@dataclass
class DiagnosticReport:
    """All measures for one dataset, with the REML baseline fit and the ML fit used by the likelihood ratio tests."""
    fit: ModelFit
    ml_fit: ModelFit
    residuals: List[ResidualRecord]
    influence: List[TrialInfluenceRecord]
    replicates: int = 0
    failures: Dict[str, int] = field(default_factory=dict)

    def criteria(self, trial_id: int) -> List[str]:
        """Names in CRITERIA flagging a trial. psi counts basic comparisons only."""
        names = ["psi"] if any(r.flagged and r.basic for r in self.residuals if r.trial_id == trial_id) else []
        for r in self.influence:
            if r.trial_id == trial_id:
                names += [name for name, flag in [("covratio", r.covratio_flagged), ("psiratio", r.psiratio_flagged),
                                                  ("lrt", r.lrt_flagged)] if flag]
        return names

    @property
    def flagged_trials(self) -> List[int]:
        """Trials flagged by at least CONSENSUS of the four criteria, in dataset order."""
        return [r.trial_id for r in self.influence if len(self.criteria(r.trial_id)) >= CONSENSUS]


@dataclass(frozen=True)
class MeanShiftTest:
    trial_id: int
    statistic: float
    df: int
    chi2_p: float
    null_fit: ModelFit
    shift_fit: MeanShiftFit


# ---------------------------------------------------------------------------------------
"Per trial templates"


@dataclass(frozen=True)
class TrialTemplate:
    """
    Quantities of one trial that stay fixed across bootstrap replicates.

    - position: index of the trial in the dataset.
    - rebase: matrix mapping the trial's stored contrasts to contrasts vs its temporary reference.
    - design, s, corr: re-based design matrix, within-trial covariance and heterogeneity correlation.
    - computable: False if dropping the trial disconnects the network.
    """
    trial_id: int
    label: str
    position: int
    reference: int
    rebase: np.ndarray
    design: np.ndarray
    s: np.ndarray
    corr: np.ndarray
    comparisons: Tuple[Comparison, ...]
    computable: bool

    @property
    def df(self) -> int:
        return self.design.shape[0]

    @property
    def vectors(self) -> np.ndarray:
        return np.vstack([comparison.vector for comparison in self.comparisons])


def trial_comparisons(rebased: ContrastData, labels: Sequence[str]) -> Tuple[Comparison, ...]:
    """All arm pairs of a re-based trial in input order."""
    position = {treatment: k for k, treatment in enumerate(rebased.treatments)}
    comparisons = []

    for treatment_a, treatment_b in itertools.combinations(rebased.arm_order, 2):
        vector = np.zeros(rebased.observed_count)
        if treatment_b in position:
            vector[position[treatment_b]] += 1.0
        if treatment_a in position:
            vector[position[treatment_a]] -= 1.0

        comparisons.append(Comparison(treatment_a=treatment_a, treatment_b=treatment_b,
                                      label=f"{labels[treatment_a]} vs {labels[treatment_b]}",
                                      basic=rebased.reference in (treatment_a, treatment_b), vector=vector))

    return tuple(comparisons)


def trial_template(network: NetworkData, trial_id: int) -> TrialTemplate:
    contrast = network.contrast(trial_id)
    reference = network.temporary_reference(trial_id)
    rebase, _ = rebase_matrix(contrast, reference)
    rebased = transform_contrasts(contrast, reference)
    labels = [treatment.label for treatment in network.treatments]

    return TrialTemplate(trial_id=trial_id, label=network.label(trial_id), position=network.position(trial_id),
                         reference=reference, rebase=rebase, design=rebased.design(network.num_treatments),
                         s=rebased.s, corr=correlation_matrix(rebased.observed_count),
                         comparisons=trial_comparisons(rebased, labels),
                         computable=network.is_connected_without(trial_id))


def trial_templates(network: NetworkData) -> List[TrialTemplate]:
    return [trial_template(network, trial_id) for trial_id in network.trial_ids]


# ---------------------------------------------------------------------------------------
"Measures"


def _studentize(vectors: np.ndarray, resid: np.ndarray, cov: np.ndarray) -> np.ndarray:
    variances = np.einsum("kq,qr,kr->k", vectors, cov, vectors)
    values = np.full(vectors.shape[0], np.nan)
    positive = variances > 0
    values[positive] = (vectors @ resid)[positive] / np.sqrt(variances[positive])
    return values


def naive_residuals(template: TrialTemplate, y_rebased: np.ndarray, fit: ModelFit) -> np.ndarray:
    """phi for every comparison of the trial, from the fit that includes it."""
    resid = y_rebased - template.design @ fit.mu
    cov = template.s + fit.tau2 * template.corr - template.design @ fit.mu_cov @ template.design.T
    return _studentize(template.vectors, resid, cov)


def deleted_residuals(template: TrialTemplate, y_rebased: np.ndarray, loo_fit: ModelFit) -> np.ndarray:
    """psi for every comparison of the trial, from the fit without it."""
    resid = y_rebased - template.design @ loo_fit.mu
    cov = template.s + loo_fit.tau2 * template.corr + template.design @ loo_fit.mu_cov @ template.design.T
    return _studentize(template.vectors, resid, cov)


def multivariate_residual(contrast: ContrastData, fit: ModelFit) -> np.ndarray:
    """
    R_i = V^{-1/2} (y_i - X_i mu_hat), V = S_i + Psi - X_i V[mu_hat] X_i^T, symmetric square root.

    Params:
    - contrast: ContrastData of the trial, usually re-based to one of its arms.
    - fit: ModelFit of the full dataset.

    Returns:
        - array of shape (q, ). Raises NumericalError if V is not positive definite.
    """
    design = contrast.design(fit.num_treatments)
    resid = contrast.y - design @ fit.mu
    cov = contrast.s + fit.tau2 * correlation_matrix(contrast.observed_count) - design @ fit.mu_cov @ design.T

    return inverse_sqrt(cov, name=f"residual covariance of trial {contrast.trial_id}") @ resid


def covratio(fit: ModelFit, loo_fit: ModelFit) -> float:
    """det V[mu_hat^{(-i)}] / det V[mu_hat], through Cholesky log-determinants."""
    return float(np.exp(spd_logdet(loo_fit.mu_cov, name="leave-one-out mean covariance")
                        - spd_logdet(fit.mu_cov, name="mean covariance")))


def psiratio(fit: ModelFit, loo_fit: ModelFit) -> Optional[float]:
    """
    (tau2^{(-i)} / tau2)^p. det P cancels in the ratio.

    Returns None when tau2_hat is 0 (ratio undefined) and 0 when only the leave-one-out estimate is 0.
    """
    if fit.tau2 == 0:
        return None
    if loo_fit.tau2 == 0:
        return 0.0
    return float(np.exp(fit.num_treatments * (np.log(loo_fit.tau2) - np.log(fit.tau2))))


def replicate_psiratio(fit: ModelFit, loo_fit: ModelFit) -> float:
    """
    PSIRATIO of a bootstrap replicate, defined at tau2_hat = 0 so that no replicate is dropped: 1 when both estimates
    are 0 (heterogeneity unchanged) and +inf when heterogeneity only appears without the trial.
    """
    if fit.tau2 == 0:
        return 1.0 if loo_fit.tau2 == 0 else np.inf
    return psiratio(fit, loo_fit)


def leave_one_out_fit(network: NetworkData, trial_id: int, rotated: Optional[RotatedContrasts] = None,
                      method: str = "REML", **fit_kwargs) -> Optional[ModelFit]:
    """
    Refit without one trial, with the same method and optimiser settings.

    Returns:
        - ModelFit, or None if the remaining network is disconnected.
    """
    if not network.is_connected_without(trial_id):
        return None

    rotated = RotatedContrasts.from_contrasts(network.contrasts, network.num_treatments) if rotated is None \
        else rotated

    return fit_model(rotated.without(rotated.position(trial_id)), method=method, **get_fit_options(**fit_kwargs))


def studentized_residual(network: NetworkData, trial_id: int, fit: ModelFit, loo: bool = True,
                         loo_fit: Optional[ModelFit] = None, all_comparisons: bool = True,
                         **fit_kwargs) -> List[ResidualRecord]:
    """
    Comparison-specific residuals of one trial.

    Params:
    - network: NetworkData object.
    - trial_id: trial to diagnose.
    - fit: REML fit of the full dataset (gives phi).
    - loo: compute psi from the leave-one-out fit (fitted here unless 'loo_fit' is given).
    - all_comparisons: include pairs that do not involve the temporary reference (multi-arm trials).
    - fit_kwargs: optimiser settings of the leave-one-out refit.

    Returns:
        - list of ResidualRecord. psi is NaN and computable False if the leave-one-out network is disconnected.
    """
    template = trial_template(network, trial_id)
    y_rebased = template.rebase @ network.contrast(trial_id).y

    phi = naive_residuals(template, y_rebased, fit)
    psi = np.full(phi.shape, np.nan)
    computable = False

    if loo:
        loo_fit = leave_one_out_fit(network, trial_id, **fit_kwargs) if loo_fit is None else loo_fit
        if loo_fit is not None:
            psi, computable = deleted_residuals(template, y_rebased, loo_fit), True

    return [ResidualRecord(trial_id=trial_id, label=template.label,
                           comparison=(comparison.treatment_a, comparison.treatment_b),
                           comparison_label=comparison.label, basic=comparison.basic, phi=float(phi[k]),
                           psi=float(psi[k]), computable=computable)
            for k, comparison in enumerate(template.comparisons) if all_comparisons or comparison.basic]


def mean_shift_statistic(rotated: RotatedContrasts, trial_id: int, **fit_kwargs) -> Tuple[float, ModelFit,
                                                                                          MeanShiftFit]:
    """
    T = 2 (l_shift - l_null) from ML fits on one dataset. The models are nested, so only round-off below LOGLIK_TOL is
    clipped to 0; a larger deficit of the mean-shift fit raises NumericalError.
    """
    options = get_fit_options(**fit_kwargs)
    null_fit = fit_model(rotated, method="ML", **options)
    shift_fit = fit_mean_shift(rotated, trial_id, method="ML", **options)

    difference = shift_fit.loglik - null_fit.loglik
    if difference < -LOGLIK_TOL:
        raise NumericalError(f"Mean-shift fit of trial {trial_id} has a log-likelihood {-difference:.3g} below the "
                             f"null fit.")

    return max(0.0, 2 * difference), null_fit, shift_fit


def lrt_mean_shift(network: NetworkData, trial_id: int, **fit_kwargs) -> MeanShiftTest:
    """
    Likelihood ratio test of the mean-shift model for one trial.

    The trial is coded against its temporary reference in both fits, so df is its number of informative contrasts.
    """
    rebased_network = network.with_rebased(trial_id)
    rotated = RotatedContrasts.from_contrasts(rebased_network.contrasts, network.num_treatments)
    statistic, null_fit, shift_fit = mean_shift_statistic(rotated, trial_id, **fit_kwargs)

    contrast = rebased_network.contrast(trial_id)
    shift_fit = replace(shift_fit, eta_treatments=contrast.treatments, eta_reference=contrast.reference)
    df = contrast.observed_count

    return MeanShiftTest(trial_id=trial_id, statistic=statistic, df=df, chi2_p=float(chi2.sf(statistic, df)),
                         null_fit=null_fit, shift_fit=shift_fit)


# ---------------------------------------------------------------------------------------
"Leave-one-out sweep shared by observed data and bootstrap replicates"


@dataclass
class LooMeasures:
    """
    Leave-one-out measures of every trial of a dataset.

    - phi, psi: dict trial id -> array over the trial's comparisons (template order).
    - covratio, psiratio, tau2_loo: dict trial id -> float (NaN when not computable or undefined).
    """
    fit: ModelFit
    loo_fits: Dict[int, Optional[ModelFit]]
    phi: Dict[int, np.ndarray]
    psi: Dict[int, np.ndarray]
    covratio: Dict[int, float]
    psiratio: Dict[int, float]


def compute_loo_measures(rotated: RotatedContrasts, templates: Sequence[TrialTemplate], method: str = "REML",
                         fit: Optional[ModelFit] = None, **fit_kwargs) -> LooMeasures:
    """
    Baseline fit of the dataset, then one leave-one-out refit per computable trial with the same method.

    Params:
    - rotated: RotatedContrasts with the dataset (observed or replicated outcomes).
    - templates: TrialTemplate list for the same trials.
    - method: "REML" or "ML".
    - fit: baseline fit of the same dataset and method, if already available.
    - fit_kwargs: optimiser settings.
    """
    options = get_fit_options(**fit_kwargs)
    fit = fit_model(rotated, method=method, **options) if fit is None else fit

    loo_fits, phi, psi, covratios, psiratios = {}, {}, {}, {}, {}
    for template in templates:
        rows = rotated.rows(template.position)
        y_rebased = template.rebase @ (rotated.back_rotations[template.position] @ rotated.z[rows])

        phi[template.trial_id] = naive_residuals(template, y_rebased, fit)

        if not template.computable:
            loo_fits[template.trial_id] = None
            psi[template.trial_id] = np.full(len(template.comparisons), np.nan)
            covratios[template.trial_id], psiratios[template.trial_id] = np.nan, np.nan
            continue

        loo_fit = fit_model(rotated.without(template.position), method=method, **options)
        ratio = psiratio(fit, loo_fit)

        loo_fits[template.trial_id] = loo_fit
        psi[template.trial_id] = deleted_residuals(template, y_rebased, loo_fit)
        covratios[template.trial_id] = covratio(fit, loo_fit)
        psiratios[template.trial_id] = np.nan if ratio is None else ratio

    return LooMeasures(fit=fit, loo_fits=loo_fits, phi=phi, psi=psi, covratio=covratios, psiratio=psiratios)


def diagnose(network: NetworkData, all_comparisons: bool = True, fit_options: Optional[dict] = None,
             rotated: Optional[RotatedContrasts] = None, fit: Optional[ModelFit] = None) -> DiagnosticReport:
    """
    All measures on the observed data, without bootstrap calibration.

    Params:
    - network: NetworkData object.
    - all_comparisons: keep residual records of pairs not involving the temporary reference.
    - fit_options: optimiser settings and baseline "method" (REML by default).
    - rotated: RotatedContrasts of the network, built here if None.
    - fit: baseline fit of the network with that method, refitted here if None.

    Returns:
        - DiagnosticReport with flags from the normal and chi2 criteria.
    """
    fit_options = {} if fit_options is None else fit_options
    rotated = RotatedContrasts.from_contrasts(network.contrasts, network.num_treatments) if rotated is None \
        else rotated
    templates = trial_templates(network)

    measures = compute_loo_measures(rotated, templates, method=fit_options.get("method", "REML"),
                                    fit=fit, **get_fit_options(**fit_options))
    ml_fit = fit_model(rotated, method="ML", **get_fit_options(**fit_options))

    residuals, influence = [], []
    for template in templates:
        trial_id = template.trial_id
        psi, phi = measures.psi[trial_id], measures.phi[trial_id]

        for k, comparison in enumerate(template.comparisons):
            if not (all_comparisons or comparison.basic):
                continue
            record = ResidualRecord(trial_id=trial_id, label=template.label,
                                    comparison=(comparison.treatment_a, comparison.treatment_b),
                                    comparison_label=comparison.label, basic=comparison.basic, phi=float(phi[k]),
                                    psi=float(psi[k]), computable=template.computable)
            record.flagged = record.exceeds_normal
            residuals.append(record)

        # Multivariate residual on the re-based contrasts
        rebased = network.rebased(trial_id)
        try:
            norm2 = float(np.sum(multivariate_residual(rebased, measures.fit) ** 2))
        except NumericalError:
            norm2 = np.nan

        test = lrt_mean_shift(network, trial_id, **fit_options)
        ratio = measures.psiratio[trial_id]
        loo_fit = measures.loo_fits[trial_id]

        record = TrialInfluenceRecord(trial_id=trial_id, label=template.label, covratio=measures.covratio[trial_id],
                                      psiratio=None if np.isnan(ratio) and template.computable else ratio,
                                      lrt=test.statistic, df=test.df, chi2_p=test.chi2_p,
                                      computable=template.computable,
                                      tau2_loo=np.nan if loo_fit is None else loo_fit.tau2, mvr_norm2=norm2,
                                      mvr_p=float(chi2.sf(norm2, template.df)) if np.isfinite(norm2) else np.nan)
        record.lrt_flagged = record.chi2_p < 1 - CHI2_LEVEL
        influence.append(record)

    return DiagnosticReport(fit=measures.fit, ml_fit=ml_fit, residuals=residuals, influence=influence)


def observed_effects(network: NetworkData, level: float = 0.95) -> pd.DataFrame:
    """
    Each trial's own odds ratio for every pair of its arms ("A vs B" is the OR of A relative to B), with Wald CI.
    Computed on the corrected arm counts.
    """
    rows = []
    for trial in network.trials:
        arm_order = [arm.treatment.id for arm in trial.real_arms]
        for treatment_a, treatment_b in itertools.combinations(arm_order, 2):
            odds_ratio, lower, upper = trial_odds_ratio(trial, treatment_a, treatment_b, level=level)
            rows.append({"trial_id": trial.id, "study": trial.label,
                         "comparison": f"{network.treatment_label(treatment_a)} vs "
                                       f"{network.treatment_label(treatment_b)}",
                         "odds_ratio": odds_ratio, "lower": lower, "upper": upper})

    return pd.DataFrame(rows, columns=["trial_id", "study", "comparison", "odds_ratio", "lower", "upper"])
