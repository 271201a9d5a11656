#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Linear algebra helpers and the eigen-rotated contrast store used by the likelihood code.

Each trial's marginal covariance is S_i + tau2 * P_i with P_i the fixed heterogeneity correlation matrix. Solving the
generalized eigenproblem S_i v = w P_i v once per trial gives v^T S_i v = diag(w) and v^T P_i v = I, so after rotating
contrasts and design rows by v^T the marginal covariance is diag(w + tau2) for every tau2. The likelihood then reduces
to a weighted least squares problem with independent rows.
"""
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from src.errors import ConfigError, NumericalError
from src.data_processing.contrasts import ContrastData

# ---------------------------------------------------------------------------------------
"Global variables"

METHODS = ["REML", "ML"]
HETEROGENEITY_CORRELATION = 0.5


# ---------------------------------------------------------------------------------------
"Factorisation helpers"


def cholesky_factor(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """
    Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NumericalError naming the matrix if it is not positive definite.
    """
    try:
        return la.cholesky(matrix, lower=True)
    except la.LinAlgError as e:
        raise NumericalError(f"Cholesky factorisation of {name} failed: {e}") from e


def logdet(chol: np.ndarray) -> float:
    """Log determinant given the Cholesky factor."""
    return float(2 * np.log(np.diag(chol)).sum())


def spd_logdet(matrix: np.ndarray, name: str = "matrix") -> float:
    return logdet(cholesky_factor(matrix, name=name))


def spd_inverse(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric positive definite matrix by Cholesky solve."""
    chol = cholesky_factor(matrix, name=name)
    inverse = la.cho_solve((chol, True), np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def inverse_sqrt(matrix: np.ndarray, name: str = "matrix", rtol: float = 1e-12) -> np.ndarray:
    """
    Symmetric inverse square root M^{-1/2} by eigendecomposition.

    Raises NumericalError if the matrix is not positive definite up to 'rtol' relative to its largest eigenvalue.
    """
    values, vectors = la.eigh(0.5 * (matrix + matrix.T))
    if values.min() <= rtol * max(abs(values.max()), 1.0):
        raise NumericalError(f"{name} is not positive definite (smallest eigenvalue {values.min():.3g}).")

    return (vectors / np.sqrt(values)) @ vectors.T


def correlation_matrix(dim: int, correlation: float = HETEROGENEITY_CORRELATION) -> np.ndarray:
    """Heterogeneity correlation matrix with unit diagonal and constant off-diagonal 'correlation'."""
    return (1 - correlation) * np.eye(dim) + correlation * np.ones((dim, dim))


def correlation_logdet(dim: int) -> float:
    """log det of the 0.5 correlation matrix, (dim + 1) / 2^dim."""
    return float(np.log(dim + 1) - dim * np.log(2))


def get_objective_from_str(method: str) -> str:
    """
    Normalise the estimation method name.

    Params:
    - method: "REML" or "ML", case insensitive.

    returns: upper case method name.
    """
    if not isinstance(method, str) or method.upper() not in METHODS:
        raise ConfigError(f"Correct estimation method not specified. Value {method} given, expected one of {METHODS}.")

    return method.upper()


# ---------------------------------------------------------------------------------------
"Rotated contrast store"


@dataclass(frozen=True)
class RotatedContrasts:
    """
    Contrasts of a set of trials in the eigen-rotated coordinates of their marginal covariance.

    - trial_ids: trial ids, in dataset order.
    - eigvals: array of shape (M, ) with generalized eigenvalues w of (S_i, P_i), stacked over trials.
    - z: array of shape (M, ), rotated contrasts v_i^T y_i.
    - g: array of shape (M, p), rotated design rows v_i^T X_i.
    - row_trial: array of shape (M, ) with the position of the trial each row belongs to.
    - logdet_offsets: array of shape (N, ) with log det P_i per trial.
    - rotations: per trial v_i, such that rotated = v_i^T y.
    - back_rotations: per trial P_i v_i, the inverse transpose of v_i^T, so that y = P_i v_i rotated.
    """
    trial_ids: Tuple[int, ...]
    num_treatments: int
    eigvals: np.ndarray
    z: np.ndarray
    g: np.ndarray
    row_trial: np.ndarray
    logdet_offsets: np.ndarray
    rotations: Tuple[np.ndarray, ...]
    back_rotations: Tuple[np.ndarray, ...]

    @classmethod
    def from_contrasts(cls, contrasts: Sequence[ContrastData], num_treatments: int) -> "RotatedContrasts":
        eigvals, z, g, row_trial, offsets, rotations, back_rotations = [], [], [], [], [], [], []

        for pos, contrast in enumerate(contrasts):
            dim = contrast.observed_count
            corr = correlation_matrix(dim)

            try:
                w, v = la.eigh(contrast.s, corr)
            except la.LinAlgError as e:
                raise NumericalError(f"Within-trial covariance of trial {contrast.trial_id} is not positive "
                                     f"definite: {e}") from e
            if w.min() <= 0:
                raise NumericalError(f"Within-trial covariance of trial {contrast.trial_id} is not positive definite "
                                     f"(eigenvalue {w.min():.3g}).")

            eigvals.append(w)
            z.append(v.T @ contrast.y)
            g.append(v.T @ contrast.design(num_treatments))
            row_trial.append(np.full(dim, pos))
            offsets.append(correlation_logdet(dim))
            rotations.append(v)
            back_rotations.append(corr @ v)

        if len(eigvals) == 0:
            raise ConfigError("Cannot build a rotated dataset from an empty contrast list.")

        return cls(trial_ids=tuple(c.trial_id for c in contrasts), num_treatments=num_treatments,
                   eigvals=np.concatenate(eigvals), z=np.concatenate(z), g=np.vstack(g),
                   row_trial=np.concatenate(row_trial).astype(int), logdet_offsets=np.asarray(offsets),
                   rotations=tuple(rotations), back_rotations=tuple(back_rotations))

    @property
    def num_trials(self) -> int:
        return len(self.trial_ids)

    @property
    def num_rows(self) -> int:
        return self.z.shape[0]

    def position(self, trial_id: int) -> int:
        try:
            return self.trial_ids.index(trial_id)
        except ValueError:
            raise ConfigError(f"Trial id {trial_id} not in dataset {list(self.trial_ids)}.") from None

    def rows(self, position: int) -> np.ndarray:
        return np.flatnonzero(self.row_trial == position)

    def subset(self, keep: Sequence[int]) -> "RotatedContrasts":
        """Dataset restricted to trials at positions 'keep' (order of the original dataset is kept)."""
        keep = sorted(set(keep))
        row_mask = np.isin(self.row_trial, keep)
        remap = np.full(self.num_trials, -1)
        remap[keep] = np.arange(len(keep))

        return RotatedContrasts(trial_ids=tuple(self.trial_ids[k] for k in keep), num_treatments=self.num_treatments,
                                eigvals=self.eigvals[row_mask], z=self.z[row_mask], g=self.g[row_mask],
                                row_trial=remap[self.row_trial[row_mask]],
                                logdet_offsets=self.logdet_offsets[keep],
                                rotations=tuple(self.rotations[k] for k in keep),
                                back_rotations=tuple(self.back_rotations[k] for k in keep))

    def without(self, position: int) -> "RotatedContrasts":
        return self.subset([k for k in range(self.num_trials) if k != position])

    def unrotate(self, z: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ...]:
        """Per-trial contrast vectors in original coordinates from rotated values (default: stored z)."""
        z = self.z if z is None else z
        return tuple(back @ z[self.rows(pos)] for pos, back in enumerate(self.back_rotations))

    def with_rotated(self, z: np.ndarray) -> "RotatedContrasts":
        if z.shape != self.z.shape:
            raise ValueError(f"Rotated outcomes must have shape {self.z.shape}. Got {z.shape}.")
        return replace(self, z=np.asarray(z, dtype=float))
