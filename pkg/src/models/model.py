#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Contrast-based multivariate random-effects model for network meta-analysis.

    y_i ~ N(X_i mu, S_i + Psi_i),    Psi = tau2 * P,    P_jj = 1, P_jk = 0.5

X_i maps the grand mean vector mu (log odds ratios of treatments 1..p vs treatment 0) to the contrasts observed in
trial i. Estimation profiles mu out by generalized least squares, so REML and ML fits are one dimensional searches
over tau2.

The direct functions (marginal_precision, profile_mu, log_likelihood, restricted_log_likelihood) work trial by trial
on the original contrasts. Fitting uses the rotated representation of src.models.model_utils, which gives the same
values in a fraction of the time and is what the bootstrap needs.
"""
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from scipy.optimize import minimize_scalar

from src.errors import ConfigError, ConvergenceError, NetworkDataError, NumericalError
from src.data_processing.contrasts import ContrastData
from src.models.model_utils import (RotatedContrasts, cholesky_factor, correlation_matrix, get_objective_from_str,
                                    logdet, spd_inverse, HETEROGENEITY_CORRELATION)

LOG_2PI = np.log(2 * np.pi)

# Default optimiser settings (model_config.json mirrors these)
TAU2_MAX = 10.0
TOL = 1e-10
MAX_ITER = 500
GRID_SIZE = 25

ContrastInput = Union[Sequence[ContrastData], RotatedContrasts]


# ---------------------------------------------------------------------------------------
"Result types"


@dataclass(frozen=True)
class HeterogeneityStructure:
    """Equal variance heterogeneity: Psi = tau2 * P, P with unit diagonal and 0.5 correlations."""
    tau2: float
    dimension: int
    correlation: float = HETEROGENEITY_CORRELATION

    def __post_init__(self):
        if self.tau2 < 0:
            raise ConfigError(f"Heterogeneity variance must be non-negative. Got {self.tau2}.")
        if self.dimension < 1:
            raise ConfigError(f"Dimension must be at least 1. Got {self.dimension}.")

    @property
    def psi(self) -> np.ndarray:
        return self.tau2 * correlation_matrix(self.dimension, self.correlation)

    def restricted(self, dim: int) -> np.ndarray:
        """Psi on the dim observed components of a trial. Same form for any set of contrasts sharing a reference."""
        return self.tau2 * correlation_matrix(dim, self.correlation)

    @property
    def logdet(self) -> float:
        """log det Psi, -inf when tau2 is 0."""
        if self.tau2 == 0:
            return -np.inf
        _, value = np.linalg.slogdet(self.psi)
        return float(value)


@dataclass(frozen=True)
class ModelFit:
    """
    Fitted model.

    - mu: array of shape (p, ), grand mean log odds ratios vs the global reference.
    - tau2: heterogeneity variance estimate.
    - mu_cov: array of shape (p, p), V[mu_hat] = (sum_i X_i^T W_i X_i)^{-1}.
    - loglik: objective at the optimum (restricted log-likelihood for REML, log-likelihood for ML).
    - iterations: number of objective evaluations.
    - at_upper_bound: True if tau2 stopped at the upper end of the search interval.
    """
    mu: np.ndarray
    tau2: float
    mu_cov: np.ndarray
    loglik: float
    method: str
    converged: bool = True
    iterations: int = 0
    at_upper_bound: bool = False
    num_trials: int = 0

    @property
    def tau(self) -> float:
        return float(np.sqrt(self.tau2))

    @property
    def num_treatments(self) -> int:
        return self.mu.shape[0]

    @property
    def heterogeneity(self) -> HeterogeneityStructure:
        return HeterogeneityStructure(tau2=self.tau2, dimension=self.num_treatments)

    def contrast(self, treatment_a: int, treatment_b: int) -> Tuple[float, float]:
        """Estimate and standard error of the log odds ratio of treatment a vs treatment b."""
        vector = comparison_vector(treatment_a, treatment_b, self.num_treatments)
        return float(vector @ self.mu), float(np.sqrt(vector @ self.mu_cov @ vector))


@dataclass(frozen=True)
class MeanShiftFit(ModelFit):
    """
    Fit of the model where one trial gets its own location shift eta.

    eta lives on the shifted trial's components (eta_treatments vs eta_reference) and equals the trial's residual
    y_i - X_i mu_hat at the optimum.
    """
    shifted_trial: int = -1
    eta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_treatments: Tuple[int, ...] = ()
    eta_reference: int = 0


def comparison_vector(treatment_a: int, treatment_b: int, num_treatments: int) -> np.ndarray:
    """Vector c with c^T mu the log odds ratio of a vs b (treatment 0 has mean 0)."""
    vector = np.zeros(num_treatments)
    if treatment_a > 0:
        vector[treatment_a - 1] += 1.0
    if treatment_b > 0:
        vector[treatment_b - 1] -= 1.0
    return vector


def fit_options(tau2_max: float = TAU2_MAX, tol: float = TOL, max_iter: int = MAX_ITER, grid_size: int = GRID_SIZE,
                **kwargs) -> dict:
    """Optimiser settings out of a model configuration dictionary. Other keys (e.g. "method") are dropped."""
    return {"tau2_max": float(tau2_max), "tol": float(tol), "max_iter": int(max_iter), "grid_size": int(grid_size)}


def infer_num_treatments(contrasts: Sequence[ContrastData]) -> int:
    """Largest treatment index appearing in the contrasts."""
    return int(max(max(c.treatments + (c.reference,)) for c in contrasts))


def as_rotated(contrasts: ContrastInput, num_treatments: Optional[int] = None) -> RotatedContrasts:
    if isinstance(contrasts, RotatedContrasts):
        return contrasts
    if len(contrasts) == 0:
        raise NetworkDataError("No trials to fit.")
    num_treatments = infer_num_treatments(contrasts) if num_treatments is None else num_treatments
    return RotatedContrasts.from_contrasts(contrasts, num_treatments)


# ---------------------------------------------------------------------------------------
"Direct likelihood terms, one trial at a time"


def marginal_precision(contrast: ContrastData, tau2: float) -> np.ndarray:
    """
    W_i = (S_i + tau2 * P)^{-1} on the observed components of a trial.

    Params:
    - contrast: ContrastData of the trial.
    - tau2: non-negative heterogeneity variance.

    Returns:
        - array of shape (q, q).
    """
    if tau2 < 0:
        raise ConfigError(f"tau2 must be non-negative. Got {tau2}.")

    cov = contrast.s + tau2 * correlation_matrix(contrast.observed_count)
    return spd_inverse(cov, name=f"marginal covariance of trial {contrast.trial_id}")


def _information(contrasts: Sequence[ContrastData], tau2: float, num_treatments: int):
    info, score = np.zeros((num_treatments, num_treatments)), np.zeros(num_treatments)
    for contrast in contrasts:
        precision = marginal_precision(contrast, tau2)
        design = contrast.design(num_treatments)
        info += design.T @ precision @ design
        score += design.T @ precision @ contrast.y
    return 0.5 * (info + info.T), score


def profile_mu(contrasts: Sequence[ContrastData], tau2: float,
               num_treatments: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized least squares estimate of mu at fixed tau2.

    Returns:
        - mu: array of shape (p, ), solving sum_i X_i^T W_i (y_i - X_i mu) = 0.
        - mu_cov: array of shape (p, p), (sum_i X_i^T W_i X_i)^{-1}.
    """
    num_treatments = infer_num_treatments(contrasts) if num_treatments is None else num_treatments
    info, score = _information(contrasts, tau2, num_treatments)

    chol = cholesky_factor(info, name="information matrix (is the network connected?)")
    mu = la.cho_solve((chol, True), score)

    return mu, spd_inverse(info, name="information matrix")


def log_likelihood(contrasts: Sequence[ContrastData], mu: np.ndarray, tau2: float) -> float:
    """
    Log-likelihood of the model at (mu, tau2), all terms on observed components.

    l = -1/2 sum_i [log det(S_i + Psi) + (y_i - X_i mu)^T W_i (y_i - X_i mu) + q_i log 2 pi]
    """
    mu = np.asarray(mu, dtype=float)
    total = 0.0

    for contrast in contrasts:
        cov = contrast.s + tau2 * correlation_matrix(contrast.observed_count)
        chol = cholesky_factor(cov, name=f"marginal covariance of trial {contrast.trial_id}")
        resid = contrast.y - contrast.design(mu.shape[0]) @ mu
        whitened = la.solve_triangular(chol, resid, lower=True)
        total += logdet(chol) + whitened @ whitened + contrast.observed_count * LOG_2PI

    return -0.5 * total


def restricted_log_likelihood(contrasts: Sequence[ContrastData], tau2: float,
                              num_treatments: Optional[int] = None) -> float:
    """
    Restricted log-likelihood at tau2 with mu profiled, additive constant set to 0:

        l_RL(tau2) = l(mu_hat(tau2), tau2) - 1/2 log det(sum_i X_i^T W_i X_i)
    """
    num_treatments = infer_num_treatments(contrasts) if num_treatments is None else num_treatments
    info, score = _information(contrasts, tau2, num_treatments)

    chol = cholesky_factor(info, name="information matrix (is the network connected?)")
    mu = la.cho_solve((chol, True), score)

    return log_likelihood(contrasts, mu, tau2) - 0.5 * logdet(chol)


# ---------------------------------------------------------------------------------------
"Rotated objective"


def _solve_information(info: np.ndarray, score: np.ndarray, allow_singular: bool):
    """Solve info @ mu = score. Returns (mu, log det info, factor or None)."""
    try:
        chol = la.cholesky(info, lower=True)
        return la.cho_solve((chol, True), score), logdet(chol), chol
    except la.LinAlgError:
        if not allow_singular:
            raise NumericalError("Information matrix is singular (is the network connected?).") from None

    # Treatments only informed by an excluded trial: minimum norm solution
    pinv = la.pinvh(info)
    values = la.eigvalsh(info)
    return pinv @ score, float(np.log(values[values > 1e-12 * values.max()]).sum()), None


def evaluate_objective(rotated: RotatedContrasts, tau2: float, method: str = "REML", shifted: Optional[int] = None,
                       allow_singular: bool = False) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Profiled objective at tau2 on rotated contrasts.

    Params:
    - rotated: RotatedContrasts object.
    - tau2: heterogeneity variance.
    - method: "REML" or "ML".
    - shifted: position of a trial with a free location shift. Its quadratic term drops out, its log-determinant and
    2 pi terms stay.
    - allow_singular: accept a singular information matrix (mean-shift of a trial that is the only one informing a
    treatment).

    Returns:
        - objective value, mu, information matrix.
    """
    variances = rotated.eigvals + tau2
    weights = 1.0 / variances

    if shifted is None:
        g, z, w = rotated.g, rotated.z, weights
    else:
        active = rotated.row_trial != shifted
        g, z, w = rotated.g[active], rotated.z[active], weights[active]

    info = g.T @ (w[:, None] * g)
    score = g.T @ (w * z)
    mu, info_logdet, _ = _solve_information(0.5 * (info + info.T), score, allow_singular)

    resid = z - g @ mu
    value = -0.5 * (np.log(variances).sum() + rotated.logdet_offsets.sum() + (w * resid ** 2).sum()
                    + rotated.num_rows * LOG_2PI)

    if method == "REML":
        value -= 0.5 * info_logdet

    return float(value), mu, info


def _maximise_tau2(objective, tau2_max: float, tol: float, max_iter: int, grid_size: int):
    """
    Grid search on tau over [0, sqrt(tau2_max)], then bounded Brent on the bracket around the best grid point. The
    boundary tau2 = 0 is always a candidate.

    Returns:
        - tau2, converged flag, number of evaluations.
    """
    if tau2_max <= 0:
        raise ConfigError(f"tau2_max must be positive. Got {tau2_max}.")
    if grid_size < 3:
        raise ConfigError(f"grid_size must be at least 3. Got {grid_size}.")

    def safe_objective(tau):
        try:
            value = objective(tau ** 2)
        except NumericalError:
            return -np.inf
        return value if np.isfinite(value) else -np.inf

    taus = np.linspace(0.0, np.sqrt(tau2_max), grid_size)
    values = np.array([safe_objective(tau) for tau in taus])
    if not np.isfinite(values).any():
        raise NumericalError("Objective is not finite anywhere on the tau2 search grid.")

    best = int(np.argmax(values))
    lower, upper = taus[max(best - 1, 0)], taus[min(best + 1, grid_size - 1)]

    result = minimize_scalar(lambda tau: -safe_objective(tau), bounds=(lower, upper), method="bounded",
                             options={"xatol": tol, "maxiter": max_iter})

    candidates = [(values[0], 0.0), (values[best], taus[best])]
    if np.isfinite(result.fun):
        candidates.append((-result.fun, float(result.x)))

    # Highest objective wins, ties go to the smaller tau
    _, tau = max(candidates, key=lambda item: (item[0], -item[1]))

    return tau ** 2, bool(result.success), grid_size + int(result.nfev)


def _fit(rotated: RotatedContrasts, method: str, shifted: Optional[int], tau2_max: float, tol: float,
         max_iter: int, grid_size: int):
    allow_singular = shifted is not None

    def objective(tau2):
        return evaluate_objective(rotated, tau2, method=method, shifted=shifted, allow_singular=allow_singular)[0]

    tau2, converged, iterations = _maximise_tau2(objective, tau2_max, tol, max_iter, grid_size)
    value, mu, info = evaluate_objective(rotated, tau2, method=method, shifted=shifted,
                                         allow_singular=allow_singular)

    try:
        mu_cov = spd_inverse(info, name="information matrix")
    except NumericalError:
        if not allow_singular:
            raise
        mu_cov = la.pinvh(info)

    at_upper_bound = tau2 >= tau2_max * (1 - 1e-6)
    if at_upper_bound:
        warnings.warn(f"{method} estimate of tau2 reached the upper search bound {tau2_max}. Consider a larger "
                      f"tau2_max.")

    return dict(mu=mu, tau2=float(tau2), mu_cov=mu_cov, loglik=value, method=method, converged=converged,
                iterations=iterations, at_upper_bound=bool(at_upper_bound), num_trials=rotated.num_trials)


# ---------------------------------------------------------------------------------------
"Fitting"


def fit_model(contrasts: ContrastInput, method: str = "REML", num_treatments: Optional[int] = None,
              tau2_max: float = TAU2_MAX, tol: float = TOL, max_iter: int = MAX_ITER, grid_size: int = GRID_SIZE,
              **kwargs) -> ModelFit:
    """
    Fit the model by REML or ML.

    Params:
    - contrasts: list of ContrastData or a RotatedContrasts object.
    - method: "REML" or "ML".
    - num_treatments: p. Inferred from the contrasts if not given.
    - tau2_max: upper end of the tau2 search interval.
    - tol: absolute tolerance of the bounded search (on the tau scale).
    - max_iter: maximum number of bounded search iterations.
    - grid_size: number of tau grid points scanned before the bounded search.
    - kwargs: other configuration entries, ignored.

    Returns:
        - ModelFit object. Raises ConvergenceError carrying the best fit found if the search does not converge.
    """
    method = get_objective_from_str(method)
    rotated = as_rotated(contrasts, num_treatments)

    fit = ModelFit(**_fit(rotated, method, None, tau2_max, tol, max_iter, grid_size))
    if not fit.converged:
        raise ConvergenceError(f"{method} fit did not converge in {max_iter} iterations.", best=fit)

    return fit


def fit_mean_shift(contrasts: ContrastInput, shifted: int, num_treatments: Optional[int] = None,
                   method: str = "ML", tau2_max: float = TAU2_MAX, tol: float = TOL, max_iter: int = MAX_ITER,
                   grid_size: int = GRID_SIZE, **kwargs) -> MeanShiftFit:
    """
    Fit the mean-shifted model for one trial, jointly over (mu, eta, tau2).

    eta is profiled out: at any tau2 its optimum equals the trial's residual, so the trial's quadratic form vanishes
    and only its log-determinant remains. The shifted trial should be coded against one of its own arms.

    Params:
    - contrasts: list of ContrastData or a RotatedContrasts object.
    - shifted: trial id of the shifted trial.
    - other params as fit_model.

    Returns:
        - MeanShiftFit object.
    """
    method = get_objective_from_str(method)
    rotated = as_rotated(contrasts, num_treatments)
    position = rotated.position(shifted)

    params = _fit(rotated, method, position, tau2_max, tol, max_iter, grid_size)

    # eta_hat = y_i - X_i mu_hat, back in the trial's own coordinates
    rows = rotated.rows(position)
    eta = rotated.back_rotations[position] @ (rotated.z[rows] - rotated.g[rows] @ params["mu"])

    treatments, reference = (), 0
    if not isinstance(contrasts, RotatedContrasts):
        treatments, reference = contrasts[position].treatments, contrasts[position].reference

    fit = MeanShiftFit(**params, shifted_trial=shifted, eta=eta, eta_treatments=treatments, eta_reference=reference)

    if not fit.converged:
        raise ConvergenceError(f"Mean-shift {method} fit for trial {shifted} did not converge in {max_iter} "
                               f"iterations.", best=fit)

    return fit
