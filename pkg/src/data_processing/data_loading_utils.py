#!/usr/bin/env python3
"""
Utility functions and container for a prepared network meta-analysis dataset.
"""
from dataclasses import dataclass, replace
from typing import Iterable, List, Sequence, Tuple, Union

from src.errors import ConfigError
from src.data_processing.trials import Trial, Treatment, is_connected
from src.data_processing.contrasts import (ContrastData, apply_continuity_correction, augment_reference,
                                           compute_contrasts, temporary_reference, transform_contrasts,
                                           CONTINUITY_INCREMENT, AUGMENT_EVENTS, AUGMENT_SIZE)


@dataclass(frozen=True)
class NetworkData:
    """
    Prepared dataset.

    - treatments: canonical coding, index 0 is the global reference.
    - raw_trials: trials as parsed (used for participant counts).
    - trials: trials after continuity correction and reference augmentation.
    - contrasts: per trial contrasts against the global reference (pseudo reference when augmented).
    - reference_policy: how the temporary reference of a diagnosed trial is chosen.
    """
    treatments: Tuple[Treatment, ...]
    raw_trials: Tuple[Trial, ...]
    trials: Tuple[Trial, ...]
    contrasts: Tuple[ContrastData, ...]
    reference_policy: str = "lowest_index"

    @property
    def num_treatments(self) -> int:
        """Dimension p of the grand mean vector."""
        return len(self.treatments) - 1

    @property
    def trial_ids(self) -> Tuple[int, ...]:
        return tuple(trial.id for trial in self.trials)

    def position(self, trial_id: int) -> int:
        for pos, trial in enumerate(self.trials):
            if trial.id == trial_id:
                return pos
        raise ConfigError(f"Trial id {trial_id} not found. Available ids: {list(self.trial_ids)}")

    def trial(self, trial_id: int) -> Trial:
        return self.trials[self.position(trial_id)]

    def contrast(self, trial_id: int) -> ContrastData:
        return self.contrasts[self.position(trial_id)]

    def label(self, trial_id: int) -> str:
        return self.trial(trial_id).label

    def treatment_label(self, treatment_id: int) -> str:
        return self.treatments[treatment_id].label

    def temporary_reference(self, trial_id: int) -> int:
        return temporary_reference(self.contrast(trial_id), self.reference_policy)

    def rebased(self, trial_id: int) -> ContrastData:
        """Contrasts of one trial against its temporary reference (head-to-head coding, pseudo-arm dropped)."""
        return transform_contrasts(self.contrast(trial_id), self.temporary_reference(trial_id))

    def with_rebased(self, trial_id: int) -> "NetworkData":
        """Dataset with one trial coded against its temporary reference."""
        pos = self.position(trial_id)
        contrasts = list(self.contrasts)
        contrasts[pos] = self.rebased(trial_id)
        return replace(self, contrasts=tuple(contrasts))

    def without(self, trial_ids: Iterable[int]) -> "NetworkData":
        """Dataset excluding the given trials."""
        excluded = set(trial_ids)
        keep = [pos for pos, trial in enumerate(self.trials) if trial.id not in excluded]
        return replace(self, raw_trials=tuple(self.raw_trials[pos] for pos in keep),
                       trials=tuple(self.trials[pos] for pos in keep),
                       contrasts=tuple(self.contrasts[pos] for pos in keep))

    def is_connected_without(self, trial_id: int) -> bool:
        """True if the network of real arms stays connected over all treatments after dropping a trial."""
        remaining = [trial for trial in self.trials if trial.id != trial_id]
        return is_connected(remaining, self.treatments)

    @property
    def total_participants(self) -> float:
        return float(sum(trial.participants for trial in self.raw_trials))


def prepare_trials(trials: Sequence[Trial], treatments: Sequence[Treatment],
                   continuity_increment: float = CONTINUITY_INCREMENT, augment_events: float = AUGMENT_EVENTS,
                   augment_size: float = AUGMENT_SIZE) -> Tuple[List[Trial], List[ContrastData]]:
    """
    Apply continuity correction and reference augmentation, then compute contrasts vs the global reference.

    Returns:
        - list of processed Trial objects.
        - list of ContrastData, one per trial.
    """
    reference = treatments[0]
    processed, contrasts = [], []

    for trial in trials:
        trial = apply_continuity_correction(trial, increment=continuity_increment)
        trial = augment_reference(trial, d0=augment_events, n0=augment_size, reference=reference)
        processed.append(trial)
        contrasts.append(compute_contrasts(trial, reference=reference.id))

    return processed, contrasts


def resolve_trial_ids(trials: Sequence[Trial], keys: Iterable[Union[int, str]]) -> List[int]:
    """
    Convert a list of trial ids and/or trial labels into trial ids.

    Labels matching more than one trial (e.g. 'ALLHAT') resolve to all of them.
    """
    ids = []
    for key in keys:
        key_str = str(key).strip()
        if key_str == "":
            continue
        matches = [trial.id for trial in trials if str(trial.id) == key_str]
        if not matches:
            matches = [trial.id for trial in trials if trial.label.lower() == key_str.lower()]
        if not matches:
            raise ConfigError(f"Exclusion '{key_str}' names no trial. Available ids: {[t.id for t in trials]}")
        ids.extend(match for match in matches if match not in ids)

    return ids
