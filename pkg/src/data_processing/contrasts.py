#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Per-trial log odds ratio contrasts and their within-trial covariance matrices.

Contrasts of a trial are taken against a single reference arm, so all of them share the reference arm's variance
term 1/d_r + 1/(n_r - d_r) as covariance. Trials without the global reference get a pseudo reference arm first
(0.001 events in 0.01 participants by default), trials with an empty or full cell get a continuity correction.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.stats import norm

from src.errors import ConfigError, NetworkDataError
from src.data_processing.trials import Trial, TrialArm, Treatment, DEFAULT_REFERENCE

# ---------------------------------------------------------------------------------------
"Global defaults"

CONTINUITY_INCREMENT = 0.5
AUGMENT_EVENTS = 0.001
AUGMENT_SIZE = 0.01


@dataclass(frozen=True)
class ContrastData:
    """
    Observed contrast vector of one trial.

    - reference: treatment id the contrasts are taken against.
    - treatments: treatment ids of the components, in trial arm order.
    - y: array of shape (q, ) with log odds ratios of each component treatment vs reference.
    - s: array of shape (q, q), within-trial covariance of y.
    - arm_order: real (non pseudo) treatment ids in input order.
    - informative_count: number of real arms minus one.
    - pseudo_reference: True if the reference arm is the augmentation pseudo-arm.
    """
    trial_id: int
    reference: int
    treatments: Tuple[int, ...]
    y: np.ndarray
    s: np.ndarray
    arm_order: Tuple[int, ...]
    informative_count: int
    pseudo_reference: bool = False

    @property
    def observed_count(self) -> int:
        return len(self.treatments)

    def design(self, num_treatments: int) -> np.ndarray:
        """
        Design matrix mapping the grand mean vector (treatments 1..p vs global reference 0) to the contrasts.

        Returns:
            - array of shape (q, p) with rows e_t - e_ref, where e_0 is the zero vector.
        """
        design = np.zeros((self.observed_count, num_treatments))
        for row, treatment in enumerate(self.treatments):
            if treatment > 0:
                design[row, treatment - 1] += 1.0
            if self.reference > 0:
                design[row, self.reference - 1] -= 1.0
        return design

    def observed_mask(self, num_treatments: int) -> np.ndarray:
        """Boolean array of shape (p, ) marking the non-reference treatments present in the trial."""
        mask = np.zeros(num_treatments, dtype=bool)
        for treatment in self.treatments + (self.reference,):
            if treatment > 0 and not (treatment == self.reference and self.pseudo_reference):
                mask[treatment - 1] = True
        return mask

    def full_y(self, num_treatments: int) -> np.ndarray:
        """Length-p vector with NaN on missing components. Only defined in global reference coding."""
        if self.reference != 0:
            raise ValueError(f"full_y requires global reference coding; contrasts use reference {self.reference}.")
        full = np.full(num_treatments, np.nan)
        for pos, treatment in enumerate(self.treatments):
            full[treatment - 1] = self.y[pos]
        return full

    def with_outcome(self, y: np.ndarray) -> "ContrastData":
        """Same trial structure with a new contrast vector (used for bootstrap replicates)."""
        return ContrastData(trial_id=self.trial_id, reference=self.reference, treatments=self.treatments,
                            y=np.asarray(y, dtype=float), s=self.s, arm_order=self.arm_order,
                            informative_count=self.informative_count, pseudo_reference=self.pseudo_reference)


# ---------------------------------------------------------------------------------------
"Arm level corrections"


def apply_continuity_correction(trial: Trial, increment: float = CONTINUITY_INCREMENT) -> Trial:
    """
    Add 'increment' to events and 2 * increment to size of every real arm, if any real arm has zero events or
    zero non-events. Pseudo-arms are never corrected.
    """
    if increment <= 0:
        raise ConfigError(f"Continuity increment must be positive. Got {increment}.")

    needs_correction = any(arm.events == 0 or arm.events == arm.size for arm in trial.real_arms)
    if not needs_correction:
        return trial

    arms = [arm if arm.pseudo else TrialArm(treatment=arm.treatment, events=arm.events + increment,
                                            size=arm.size + 2 * increment)
            for arm in trial.arms]

    return trial.with_arms(arms, corrected=True)


def augment_reference(trial: Trial, d0: float = AUGMENT_EVENTS, n0: float = AUGMENT_SIZE,
                      reference: Treatment = Treatment(id=0, label=DEFAULT_REFERENCE)) -> Trial:
    """
    Append a pseudo reference arm carrying d0 events in n0 participants to trials without the reference.

    Params:
    - trial: Trial object.
    - d0, n0: pseudo-arm counts. Must satisfy 0 < d0 < n0.
    - reference: Treatment with id 0.

    Returns:
        - trial unchanged if it already contains the reference, otherwise trial with pseudo-arm and augmented flag.
    """
    if d0 <= 0 or n0 <= d0:
        raise ConfigError(f"Augmentation requires 0 < d0 < n0. Got d0={d0}, n0={n0}.")

    if trial.has_treatment(reference.id):
        return trial

    pseudo_arm = TrialArm(treatment=reference, events=d0, size=n0, pseudo=True)

    return trial.with_arms(trial.arms + (pseudo_arm,), augmented=True)


# ---------------------------------------------------------------------------------------
"Contrast construction"


def _log_odds_and_variance(arm: TrialArm, trial: Trial) -> Tuple[float, float]:
    """Log odds and its large sample variance for one arm."""
    if arm.events <= 0 or arm.non_events <= 0:
        raise NetworkDataError(f"Trial '{trial.label}' (id {trial.id}) has a zero cell in arm "
                               f"'{arm.treatment.label}' ({arm.events}/{arm.size}). Apply a continuity correction "
                               f"first.")

    log_odds = np.log(arm.events) - np.log(arm.non_events)
    variance = 1.0 / arm.events + 1.0 / arm.non_events

    return log_odds, variance


def compute_contrasts(trial: Trial, reference: int = 0) -> ContrastData:
    """
    Compute log odds ratios of every arm vs the reference arm, with Wei-Higgins type shared-arm covariances.

    Params:
    - trial: Trial object containing the reference arm (after augmentation) and no zero cells (after correction).
    - reference: treatment id of the reference arm.

    Returns:
        - ContrastData. If the reference is a real arm, pseudo-arms are dropped.
    """
    ref_arm = trial.arm(reference)
    ref_log_odds, ref_variance = _log_odds_and_variance(ref_arm, trial)

    arms = [arm for arm in trial.arms if arm.treatment.id != reference and not arm.pseudo]
    if len(arms) == 0:
        raise NetworkDataError(f"Trial '{trial.label}' (id {trial.id}) has no arm besides the reference.")

    y, arm_variances = [], []
    for arm in arms:
        log_odds, variance = _log_odds_and_variance(arm, trial)
        y.append(log_odds - ref_log_odds)
        arm_variances.append(variance)

    # Shared reference arm variance on every entry, arm variance added on the diagonal
    s = np.full((len(arms), len(arms)), ref_variance) + np.diag(arm_variances)

    return ContrastData(trial_id=trial.id, reference=reference, treatments=tuple(arm.treatment.id for arm in arms),
                        y=np.asarray(y), s=s, arm_order=tuple(arm.treatment.id for arm in trial.real_arms),
                        informative_count=len(trial.real_arms) - 1, pseudo_reference=ref_arm.pseudo)


def rebase_contrasts(trial: Trial, new_reference: int) -> ContrastData:
    """
    Recompute contrasts of a trial against one of its real arms, so that every component is a head-to-head estimate.
    The pseudo-arm of an augmented trial is dropped.
    """
    if not any(arm.treatment.id == new_reference for arm in trial.real_arms):
        raise NetworkDataError(f"Treatment {new_reference} is not an arm of trial '{trial.label}' (id {trial.id}).")

    return compute_contrasts(trial, reference=new_reference)


def rebase_matrix(contrast: ContrastData, new_reference: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Linear map C from the contrasts of 'contrast' to contrasts against 'new_reference'.

    Returns:
        - C: array of shape (q_new, q) such that y_new = C y and S_new = C S C^T.
        - new component treatment ids.
    """
    old_position = {treatment: pos for pos, treatment in enumerate(contrast.treatments)}
    if new_reference not in old_position and new_reference != contrast.reference:
        raise NetworkDataError(f"Treatment {new_reference} is not an arm of trial {contrast.trial_id}.")
    if new_reference == contrast.reference and contrast.pseudo_reference:
        raise NetworkDataError(f"Cannot rebase trial {contrast.trial_id} onto its pseudo reference arm.")

    new_treatments = tuple(t for t in contrast.arm_order if t != new_reference)
    matrix = np.zeros((len(new_treatments), contrast.observed_count))

    for row, treatment in enumerate(new_treatments):
        if treatment in old_position:
            matrix[row, old_position[treatment]] += 1.0
        if new_reference in old_position:
            matrix[row, old_position[new_reference]] -= 1.0

    return matrix, new_treatments


def transform_contrasts(contrast: ContrastData, new_reference: int) -> ContrastData:
    """
    Re-base contrasts by the linear map of rebase_matrix (log odds ratio transitivity). Equals rebase_contrasts on
    observed data and also applies to replicated outcome vectors, which carry no arm counts.
    """
    if new_reference == contrast.reference and not contrast.pseudo_reference:
        return contrast

    matrix, new_treatments = rebase_matrix(contrast, new_reference)
    s = matrix @ contrast.s @ matrix.T

    return ContrastData(trial_id=contrast.trial_id, reference=new_reference, treatments=new_treatments,
                        y=matrix @ contrast.y, s=0.5 * (s + s.T), arm_order=contrast.arm_order,
                        informative_count=contrast.informative_count, pseudo_reference=False)


def temporary_reference(contrast: ContrastData, policy: str = "lowest_index") -> int:
    """
    Choose the arm used as reference when diagnosing a trial.

    Params:
    - policy: "lowest_index" picks the real arm with the smallest canonical treatment index, "first_arm" the arm
    listed first in the input.
    """
    if policy == "lowest_index":
        return min(contrast.arm_order)
    elif policy == "first_arm":
        return contrast.arm_order[0]
    else:
        raise ConfigError(f"Reference policy must be one of ['lowest_index', 'first_arm']. Got {policy}.")


def trial_odds_ratio(trial: Trial, treatment_a: int, treatment_b: int, level: float = 0.95,
                     ) -> Tuple[float, float, float]:
    """
    Observed odds ratio of arm a vs arm b of a trial, with Wald interval.

    Returns:
        - (odds ratio, lower, upper).
    """
    arm_a, arm_b = trial.arm(treatment_a), trial.arm(treatment_b)
    log_a, var_a = _log_odds_and_variance(arm_a, trial)
    log_b, var_b = _log_odds_and_variance(arm_b, trial)

    log_or, se = log_a - log_b, np.sqrt(var_a + var_b)
    z = norm.ppf(0.5 + level / 2)

    return float(np.exp(log_or)), float(np.exp(log_or - z * se)), float(np.exp(log_or + z * se))
