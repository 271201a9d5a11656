#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Evaluate a prepared network: fit, influence diagnostics and bootstrap calibration of every measure.

Flags:
    - psi: |psi| > 1.96 or outside its own bootstrap 2.5th/97.5th percentile interval.
    - COVRATIO, PSIRATIO: strictly below the bootstrap 5th percentile (no flag without bootstrap).
    - T: bootstrap p-value below 0.05 (chi2 p-value without bootstrap).

The flagged trial list keeps trials on which at least two of these criteria agree.
"""
from typing import Optional

from src.data_processing.data_loading_utils import NetworkData
from src.models.model_utils import RotatedContrasts
from src.results.bootstrap import BootstrapConfig, bootstrap_loo_measures, bootstrap_lrt
from src.results.diagnostics import DiagnosticReport, diagnose

SIGNIFICANCE = 0.05


def evaluate(network: NetworkData, model_config: Optional[dict] = None,
             bootstrap_config: Optional[BootstrapConfig] = None, all_comparisons: bool = True,
             verbose: bool = False) -> DiagnosticReport:
    """
    Evaluate function computing all diagnostics for a dataset.

    Params:
    - network: NetworkData object.
    - model_config: dict with optimiser settings (tau2_max, tol, max_iter, grid_size). Defaults to model defaults.
    - bootstrap_config: BootstrapConfig, or None to use the normal and chi2 criteria only.
    - all_comparisons: keep residual records of arm pairs not involving the temporary reference.
    - verbose: print stage information.

    Returns:
        - DiagnosticReport with bootstrap fields and flags filled in.
    """
    model_config = {} if model_config is None else model_config
    rotated = RotatedContrasts.from_contrasts(network.contrasts, network.num_treatments)

    report = diagnose(network, all_comparisons=all_comparisons, fit_options=model_config, rotated=rotated)

    if verbose:
        print(f"\n{report.fit.method} tau: {report.fit.tau:.4f}, ML tau: {report.ml_fit.tau:.4f}")
        print("Leave-one-out measures computed for {} of {} trials.".format(
            sum(record.computable for record in report.influence), len(report.influence)))

    if bootstrap_config is None:
        return report

    return calibrate(network, report, bootstrap_config, model_config=model_config, verbose=verbose)


def calibrate(network: NetworkData, report: DiagnosticReport, bootstrap_config: BootstrapConfig,
              model_config: Optional[dict] = None, verbose: bool = False) -> DiagnosticReport:
    """Fill in bootstrap percentiles, p-values and flags of a report computed by diagnose (in place)."""
    model_config = {} if model_config is None else model_config

    # Leave-one-out measures
    distributions = bootstrap_loo_measures(network, report.fit, bootstrap_config, fit_options=model_config,
                                           verbose=verbose)

    for record in report.residuals:
        distribution = distributions["psi"][(record.trial_id, *record.comparison)]
        if not record.computable or distribution.samples.size == 0:
            continue

        record.boot_lo, record.boot_hi = distribution.percentile(0.025), distribution.percentile(0.975)
        outside = bool(record.psi < record.boot_lo or record.psi > record.boot_hi)
        record.flagged = outside or record.exceeds_normal
        record.exceeds_both = outside and record.exceeds_normal

    for record in report.influence:
        covratio_dist = distributions["covratio"][record.trial_id]
        psiratio_dist = distributions["psiratio"][record.trial_id]

        if record.computable and covratio_dist.samples.size > 0:
            record.covratio_p05 = covratio_dist.percentile(0.05)
            record.covratio_flagged = bool(record.covratio < record.covratio_p05)

        if record.computable and psiratio_dist.samples.size > 0:
            record.psiratio_p05 = psiratio_dist.percentile(0.05)
            record.psiratio_flagged = bool(record.psiratio is not None and record.psiratio < record.psiratio_p05)

    # Mean-shift statistic, one bootstrap per trial
    for record in report.influence:
        distribution, p_value = bootstrap_lrt(network, record.trial_id, bootstrap_config, fit_options=model_config,
                                              observed=record.lrt, verbose=verbose)
        record.lrt_p95 = distribution.percentile(0.95) if distribution.samples.size > 0 else None
        record.boot_p = p_value
        record.lrt_flagged = bool(p_value < SIGNIFICANCE)

    report.replicates = bootstrap_config.replicates
    # Replicates lost to failed fits (trials without a leave-one-out fit have no samples at all)
    report.failures = {"loo": int(min((d.failures for d in distributions["covratio"].values() if d.samples.size > 0),
                                      default=0))}

    if verbose:
        labels = [network.label(trial_id) for trial_id in report.flagged_trials]
        print(f"\nBootstrap with {bootstrap_config.replicates} replicates complete. Flagged trials: {labels}")

    return report
