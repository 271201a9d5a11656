#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Load arm-level trial data into a prepared network meta-analysis dataset.
"""

from typing import List, Optional, Sequence, Union

import src.data_processing.data_loading_utils as data_utils
from src.data_processing.trials import TrialFormat, parse_trials, treatments_of, validate_network, DEFAULT_REFERENCE
from src.data_processing.contrasts import CONTINUITY_INCREMENT, AUGMENT_EVENTS, AUGMENT_SIZE
from src.errors import ConfigError, NetworkDataError


# %%  Load configuration for data loader

def data_loader(input_path: str = "data/antihypertensive/heart_failure_trials.csv",
                reference: str = DEFAULT_REFERENCE, delimiter: str = ",",
                treatments: Optional[Sequence[str]] = None,
                continuity_increment: float = CONTINUITY_INCREMENT, augment_events: float = AUGMENT_EVENTS,
                augment_size: float = AUGMENT_SIZE, reference_policy: str = "lowest_index",
                exclusions: Sequence[Union[int, str]] = (), verbose: bool = False,
                **kwargs) -> data_utils.NetworkData:
    """
    Data Loader function. Given data configuration, convert into prepared dataset.

    Params:
    - input_path: path of the long-format trial table (one row per arm).
    - reference: label of the global reference treatment.
    - delimiter: ',' for CSV, '\t' for TSV.
    - treatments: optional ordered list of registered treatment labels.
    - continuity_increment: added to every cell of trials with a zero or full cell.
    - augment_events, augment_size: pseudo reference arm counts for trials without the reference.
    - reference_policy: temporary reference choice for diagnosed trials ("lowest_index" or "first_arm").
    - exclusions: trial ids or labels to drop before preparing the dataset.
    - verbose: print summary information.
    - kwargs: other configuration entries, ignored.

    Returns:
        - NetworkData object.
    """
    fmt = TrialFormat(delimiter=delimiter, reference=reference,
                      treatments=tuple(treatments) if treatments is not None else None)

    raw_trials = parse_trials(input_path, fmt)
    if len(raw_trials) == 0:
        raise NetworkDataError(f"No trials found in {input_path}.")

    labels = {arm.treatment.label for trial in raw_trials for arm in trial.real_arms}
    if reference not in labels:
        raise ConfigError(f"Reference treatment '{reference}' does not appear in {input_path}. "
                          f"Labels found: {sorted(labels)}")

    coding = treatments_of(raw_trials, fmt)

    # Drop excluded trials first
    excluded_ids = data_utils.resolve_trial_ids(raw_trials, exclusions)
    raw_trials = [trial for trial in raw_trials if trial.id not in excluded_ids]

    # Check the comparison graph reaches every treatment
    summary = validate_network(raw_trials, coding)

    trials, contrasts = data_utils.prepare_trials(raw_trials, coding, continuity_increment=continuity_increment,
                                                  augment_events=augment_events, augment_size=augment_size)

    network = data_utils.NetworkData(treatments=coding, raw_trials=tuple(raw_trials), trials=tuple(trials),
                                     contrasts=tuple(contrasts), reference_policy=reference_policy)

    if verbose:
        print(f"\n{input_path} successfully loaded.")
        print(f"\nBasic information \n",
              f"Trials: {summary.n_trials}, treatments: {len(coding)} (reference '{coding[0].label}'), "
              f"participants: {summary.total_participants:,.0f} \n",
              f"Continuity corrected: {[t.label for t in trials if t.corrected]} \n",
              f"Reference augmented: {sum(t.augmented for t in trials)} trials")

    return network


def excluded_labels(network: data_utils.NetworkData, trial_ids: Sequence[int]) -> List[str]:
    """Labels of trials, for printing."""
    return [network.label(trial_id) for trial_id in trial_ids]
