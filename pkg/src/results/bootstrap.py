#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Parametric bootstrap calibration of the influence measures.

Replicates are drawn from the fitted model: REML fit for the leave-one-out measures (psi, COVRATIO, PSIRATIO), ML fit
of the null model for the mean-shift likelihood ratio statistic. Replicate b uses the generator
np.random.default_rng([seed, stream, b]), so results do not depend on how replicates are split across workers.
Results are merged in replicate order.
"""
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from src.errors import BootstrapError, ConfigError, NumericalError
from src.data_processing.contrasts import ContrastData
from src.data_processing.data_loading_utils import NetworkData
from src.models.model import ModelFit, as_rotated, fit_model, fit_options as get_fit_options
from src.models.model_utils import RotatedContrasts
from src.results.diagnostics import (TrialTemplate, compute_loo_measures, mean_shift_statistic, replicate_psiratio,
                                     trial_templates)

# Stream ids of the replicate generators
LOO_STREAM = 0
LRT_STREAM_OFFSET = 1000

DEFAULT_PERCENTILES = (0.025, 0.05, 0.95, 0.975)


@dataclass(frozen=True)
class BootstrapConfig:
    """
    Parametric bootstrap configuration.

    - replicates: number B of replicates.
    - seed: non-negative integer seed.
    - percentiles: sorted percentiles in (0, 1) extracted from each distribution.
    - parallel: run replicates with joblib workers.
    - n_jobs: joblib worker count (-1 for all cores).
    - max_failure_rate: fraction of failed replicates above which the run fails.
    """
    replicates: int = 2400
    seed: int = 1111
    percentiles: Tuple[float, ...] = DEFAULT_PERCENTILES
    parallel: bool = True
    n_jobs: int = -1
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if not isinstance(self.replicates, (int, np.integer)) or self.replicates < 1:
            raise ConfigError(f"Number of bootstrap replicates must be a positive integer. Got {self.replicates}.")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"Bootstrap seed must be a non-negative integer. Got {self.seed}.")
        if list(self.percentiles) != sorted(self.percentiles) or any(q <= 0 or q >= 1 for q in self.percentiles):
            raise ConfigError(f"Percentiles must be sorted values in (0, 1). Got {self.percentiles}.")
        if not 0 <= self.max_failure_rate < 1:
            raise ConfigError(f"max_failure_rate must lie in [0, 1). Got {self.max_failure_rate}.")

    @classmethod
    def from_config(cls, replicates: int = 2400, seed: int = 1111, percentiles: Sequence[float] = DEFAULT_PERCENTILES,
                    parallel: bool = True, n_jobs: int = -1, max_failure_rate: float = 0.01,
                    **kwargs) -> "BootstrapConfig":
        """Build from a configuration dictionary (other keys ignored)."""
        return cls(replicates=int(replicates), seed=int(seed), percentiles=tuple(float(q) for q in percentiles),
                   parallel=bool(parallel), n_jobs=int(n_jobs), max_failure_rate=float(max_failure_rate))


@dataclass
class BootstrapDistribution:
    """
    Bootstrap samples of one statistic.

    - statistic: "psi", "covratio", "psiratio" or "lrt".
    - trial_id, comparison: which trial (and comparison for psi).
    - samples: values in replicate order, failed replicates removed. PSIRATIO samples may be +inf.
    - failures: number of replicates without a value.
    - percentiles: dict percentile -> value.
    """
    statistic: str
    trial_id: int
    samples: np.ndarray
    failures: int = 0
    comparison: Optional[Tuple[int, int]] = None
    percentiles: Dict[float, float] = field(default_factory=dict)

    def percentile(self, q: float) -> float:
        if q not in self.percentiles:
            self.percentiles[q] = percentile(self.samples, q)
        return self.percentiles[q]


# ---------------------------------------------------------------------------------------
"Helpers"


def percentile(samples: Union[Sequence[float], np.ndarray], q: float) -> float:
    """
    Empirical quantile with linear interpolation at rank 1 + (n - 1) q. +inf samples are allowed.

    Params:
    - samples: non-empty list of values.
    - q: quantile in [0, 1].
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("Cannot compute a percentile of an empty sample.")
    if not 0 <= q <= 1:
        raise ValueError(f"Quantile must lie in [0, 1]. Got {q}.")

    if np.all(np.isfinite(samples)):
        return float(np.quantile(samples, q, method="linear"))

    # np.quantile gives NaN between two infinite order statistics
    ordered = np.sort(samples)
    position = (ordered.size - 1) * q
    lower, upper = ordered[int(np.floor(position))], ordered[int(np.ceil(position))]
    if lower == upper or position == np.floor(position):
        return float(lower)
    return float(lower + (upper - lower) * (position - np.floor(position)))


def bootstrap_p_value(samples: np.ndarray, observed: float) -> float:
    """(1 + #{T_b >= T_obs}) / (B + 1)."""
    samples = np.asarray(samples, dtype=float)
    return float((1 + np.sum(samples >= observed)) / (samples.size + 1))


def replicate_rng(seed: int, stream: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, replicate])


def sample_rotated(rotated: RotatedContrasts, fit: ModelFit, rng: np.random.Generator) -> np.ndarray:
    """
    Draw rotated contrasts from the fitted model. In rotated coordinates the marginal covariance is diag(w + tau2),
    so components are independent normals around the rotated design times mu.
    """
    mean = rotated.g @ fit.mu
    return mean + np.sqrt(rotated.eigvals + fit.tau2) * rng.standard_normal(rotated.num_rows)


def resample_dataset(contrasts: Union[Sequence[ContrastData], RotatedContrasts], fit: ModelFit,
                     rng: np.random.Generator) -> List[ContrastData]:
    """
    One parametric bootstrap dataset: y_i ~ N(X_i mu_hat, S_i + Psi_hat) on each trial's observed components.
    Within-trial covariances and missingness patterns are carried over.

    Params:
    - contrasts: list of ContrastData.
    - fit: fitted model to draw from.
    - rng: numpy Generator.

    Returns:
        - list of ContrastData with replicated outcomes.
    """
    rotated = as_rotated(contrasts, fit.num_treatments)
    outcomes = rotated.unrotate(sample_rotated(rotated, fit, rng))

    return [contrast.with_outcome(y) for contrast, y in zip(contrasts, outcomes)]


def _chunks(replicates: int, num_chunks: int) -> List[List[int]]:
    num_chunks = max(1, min(num_chunks, replicates))
    return [list(chunk) for chunk in np.array_split(np.arange(replicates), num_chunks) if len(chunk) > 0]


def _run_chunk(replicate_fn: Callable, indices: Sequence[int], *args) -> List:
    return [replicate_fn(*args, int(b)) for b in indices]


def _run_replicates(replicate_fn: Callable, args: tuple, config: BootstrapConfig, desc: str,
                    verbose: bool) -> List:
    """Run replicate_fn(*args, b) for b = 0..B-1 and return results in replicate order."""
    if config.parallel and config.n_jobs != 1:
        chunks = _chunks(config.replicates, num_chunks=64)
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_chunk)(replicate_fn, chunk, *args) for chunk in tqdm(chunks, desc=desc, disable=not verbose))
        return [value for chunk in results for value in chunk]

    return [replicate_fn(*args, b) for b in tqdm(range(config.replicates), desc=desc, disable=not verbose)]


def _check_failures(failures: int, config: BootstrapConfig, desc: str):
    if failures > config.max_failure_rate * config.replicates:
        raise BootstrapError(f"{failures} of {config.replicates} {desc} replicates failed, above the allowed rate "
                             f"{config.max_failure_rate}.")
    if failures > 0:
        warnings.warn(f"{failures} of {config.replicates} {desc} replicates failed and were skipped.")


def _distribution(statistic: str, trial_id: int, values: np.ndarray, failures: int, config: BootstrapConfig,
                  comparison: Optional[Tuple[int, int]] = None) -> BootstrapDistribution:
    """Drop NaN values (statistic not computable on the replicate) and extract the configured percentiles."""
    samples = values[~np.isnan(values)]
    distribution = BootstrapDistribution(statistic=statistic, trial_id=trial_id, samples=samples,
                                         failures=failures + int(values.size - samples.size), comparison=comparison)
    if samples.size > 0:
        for q in config.percentiles:
            distribution.percentile(q)

    return distribution


# ---------------------------------------------------------------------------------------
"Leave-one-out measures (psi, COVRATIO, PSIRATIO)"


def _loo_replicate(rotated: RotatedContrasts, templates: Sequence[TrialTemplate], fit: ModelFit, options: dict,
                   seed: int, b: int) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    rng = replicate_rng(seed, LOO_STREAM, b)
    replicate = rotated.with_rotated(sample_rotated(rotated, fit, rng))

    try:
        measures = compute_loo_measures(replicate, templates, method=fit.method, **options)
    except NumericalError:
        return None

    psi = np.concatenate([measures.psi[template.trial_id] for template in templates])
    covratio = np.array([measures.covratio[template.trial_id] for template in templates])
    psiratio = np.array([np.nan if measures.loo_fits[template.trial_id] is None
                         else replicate_psiratio(measures.fit, measures.loo_fits[template.trial_id])
                         for template in templates])

    return psi, covratio, psiratio


def bootstrap_loo_measures(network: NetworkData, fit: ModelFit, config: BootstrapConfig,
                           fit_options: Optional[dict] = None, verbose: bool = False,
                           ) -> Dict[str, Dict[Union[int, Tuple[int, int, int]], BootstrapDistribution]]:
    """
    Bootstrap distributions of psi, COVRATIO and PSIRATIO for every trial, from one set of replicates.

    Each replicate draws a dataset from the REML fit, refits it and refits each leave-one-out dataset.

    Params:
    - network: NetworkData object.
    - fit: REML fit of the observed data.
    - config: BootstrapConfig object.
    - fit_options: optimiser settings.
    - verbose: show a progress bar.

    Returns:
        - dict with keys "psi" (keyed by (trial_id, treatment_a, treatment_b)), "covratio" and "psiratio" (keyed by
        trial_id), each mapping to BootstrapDistribution objects.
    """
    options = get_fit_options(**({} if fit_options is None else fit_options))
    rotated = RotatedContrasts.from_contrasts(network.contrasts, network.num_treatments)
    templates = trial_templates(network)

    results = _run_replicates(_loo_replicate, (rotated, templates, fit, options, config.seed), config,
                              desc="Leave-one-out bootstrap", verbose=verbose)

    failures = sum(result is None for result in results)
    _check_failures(failures, config, "leave-one-out")
    results = [result for result in results if result is not None]

    psi = np.vstack([result[0] for result in results])
    covratio = np.vstack([result[1] for result in results])
    psiratio = np.vstack([result[2] for result in results])

    distributions = {"psi": {}, "covratio": {}, "psiratio": {}}
    column = 0
    for k, template in enumerate(templates):
        for comparison in template.comparisons:
            key = (template.trial_id, comparison.treatment_a, comparison.treatment_b)
            distributions["psi"][key] = _distribution("psi", template.trial_id, psi[:, column], failures, config,
                                                      comparison=(comparison.treatment_a, comparison.treatment_b))
            column += 1

        distributions["covratio"][template.trial_id] = _distribution("covratio", template.trial_id, covratio[:, k],
                                                                     failures, config)
        distributions["psiratio"][template.trial_id] = _distribution("psiratio", template.trial_id, psiratio[:, k],
                                                                     failures, config)

    return distributions


def bootstrap_residuals(network: NetworkData, fit: ModelFit, config: BootstrapConfig,
                        fit_options: Optional[dict] = None,
                        verbose: bool = False) -> Dict[Tuple[int, int, int], BootstrapDistribution]:
    """Bootstrap distributions of psi for every trial and comparison."""
    return bootstrap_loo_measures(network, fit, config, fit_options=fit_options, verbose=verbose)["psi"]


def bootstrap_trial_measures(network: NetworkData, fit: ModelFit, config: BootstrapConfig, which: str = "COVRATIO",
                             fit_options: Optional[dict] = None,
                             verbose: bool = False) -> Dict[int, BootstrapDistribution]:
    """Bootstrap distributions of COVRATIO or PSIRATIO for every trial."""
    if which.upper() not in ["COVRATIO", "PSIRATIO"]:
        raise ConfigError(f"Trial measure must be one of ['COVRATIO', 'PSIRATIO']. Got {which}.")

    return bootstrap_loo_measures(network, fit, config, fit_options=fit_options, verbose=verbose)[which.lower()]


# ---------------------------------------------------------------------------------------
"Mean-shift likelihood ratio statistic"


def _lrt_replicate(rotated: RotatedContrasts, trial_id: int, null_fit: ModelFit, options: dict, seed: int,
                   b: int) -> Optional[float]:
    rng = replicate_rng(seed, LRT_STREAM_OFFSET + trial_id, b)
    replicate = rotated.with_rotated(sample_rotated(rotated, null_fit, rng))

    try:
        statistic, _, _ = mean_shift_statistic(replicate, trial_id, **options)
    except NumericalError:
        return None

    return statistic


def bootstrap_lrt(network: NetworkData, trial_id: int, config: BootstrapConfig, fit_options: Optional[dict] = None,
                  observed: Optional[float] = None,
                  verbose: bool = False) -> Tuple[BootstrapDistribution, float]:
    """
    Bootstrap distribution of the mean-shift statistic T of one trial and its p-value.

    Replicates are drawn from the null ML fit with the trial coded against its temporary reference; both ML models
    are refitted on each replicate.

    Params:
    - network: NetworkData object.
    - trial_id: trial to test.
    - config: BootstrapConfig object.
    - fit_options: optimiser settings.
    - observed: observed T. Computed here if not given.

    Returns:
        - BootstrapDistribution, bootstrap p-value (1 + #{T_b >= T_obs}) / (B + 1).
    """
    options = get_fit_options(**({} if fit_options is None else fit_options))
    rotated = RotatedContrasts.from_contrasts(network.with_rebased(trial_id).contrasts, network.num_treatments)

    null_fit = fit_model(rotated, method="ML", **options)
    if observed is None:
        observed, _, _ = mean_shift_statistic(rotated, trial_id, **options)

    results = _run_replicates(_lrt_replicate, (rotated, trial_id, null_fit, options, config.seed), config,
                              desc=f"Mean-shift bootstrap, trial {trial_id}", verbose=verbose)

    failures = sum(result is None for result in results)
    _check_failures(failures, config, f"mean-shift (trial {trial_id})")

    values = np.array([result for result in results if result is not None], dtype=float)
    distribution = _distribution("lrt", trial_id, values, failures, config)

    return distribution, bootstrap_p_value(distribution.samples, observed)
