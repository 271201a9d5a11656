#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Arm-level trial records: parsing from long-format tables and validation of the treatment comparison graph.

One input row describes one arm of one trial (columns study, year, treatment, events, size; an optional id column
identifies trials that share a study name, e.g. the two ALLHAT reports).
"""
import itertools
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union, IO

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from src.errors import ConfigError, DisconnectedNetworkError, NetworkDataError, TrialParseError

# ---------------------------------------------------------------------------------------
"Global variables for input format."

REQUIRED_COLUMNS = ["study", "year", "treatment", "events", "size"]
ID_COLUMN = "id"
DEFAULT_REFERENCE = "Placebo"


# ---------------------------------------------------------------------------------------
"Domain types"


@dataclass(frozen=True)
class Treatment:
    """Treatment with its canonical index. Index 0 is the global reference."""
    id: int
    label: str


@dataclass(frozen=True)
class TrialArm:
    """
    One arm of a trial. Counts are real-valued so that augmented pseudo-arms (0.001 events in 0.01 participants)
    and continuity-corrected cells fit the same type.
    """
    treatment: Treatment
    events: float
    size: float
    pseudo: bool = False

    @property
    def non_events(self) -> float:
        return self.size - self.events


@dataclass(frozen=True)
class Trial:
    """
    Trial record. 'arms' keeps input order; augmentation appends the pseudo-arm last.
    """
    id: int
    label: str
    arms: Tuple[TrialArm, ...]
    year: Optional[int] = None
    augmented: bool = False
    corrected: bool = False

    @property
    def real_arms(self) -> Tuple[TrialArm, ...]:
        return tuple(arm for arm in self.arms if not arm.pseudo)

    @property
    def treatment_ids(self) -> Tuple[int, ...]:
        return tuple(arm.treatment.id for arm in self.arms)

    @property
    def participants(self) -> float:
        return float(sum(arm.size for arm in self.real_arms))

    def arm(self, treatment_id: int) -> TrialArm:
        for arm in self.arms:
            if arm.treatment.id == treatment_id:
                return arm
        raise NetworkDataError(f"Treatment {treatment_id} is not an arm of trial {self.label} (id {self.id}).")

    def has_treatment(self, treatment_id: int) -> bool:
        return treatment_id in self.treatment_ids

    def with_arms(self, arms: Sequence[TrialArm], **kwargs) -> "Trial":
        return replace(self, arms=tuple(arms), **kwargs)


@dataclass(frozen=True)
class TrialFormat:
    """
    Input format configuration.

    Params:
    - delimiter: field separator (',' for CSV, '\t' for TSV).
    - reference: label of the global reference treatment (index 0).
    - treatments: optional ordered list of registered labels. When given, the reference must be part of it and any
    other label found in the data is an error. When None, the coding is the reference first and then all other labels
    alphabetically.
    """
    delimiter: str = ","
    reference: str = DEFAULT_REFERENCE
    treatments: Optional[Tuple[str, ...]] = None


@dataclass
class NetworkSummary:
    """
    Treatment comparison graph.

    - nodes: treatments included in the graph.
    - edges: dict mapping (id_a, id_b) with id_a < id_b to the number of trials comparing them directly.
    - trial_counts / participants: per treatment id, over real arms only.
    """
    nodes: Tuple[Treatment, ...]
    edges: Dict[Tuple[int, int], int]
    trial_counts: Dict[int, int]
    participants: Dict[int, float]
    n_trials: int
    total_participants: float
    components: List[Tuple[Treatment, ...]] = field(default_factory=list)

    @property
    def connected(self) -> bool:
        return len(self.components) <= 1


# ---------------------------------------------------------------------------------------
"Parsing"


def treatment_coding(labels: Sequence[str], fmt: TrialFormat = TrialFormat()) -> Tuple[Treatment, ...]:
    """
    Compute canonical treatment coding given the labels observed in the data.

    Params:
    - labels: iterable of treatment labels (repetitions allowed).
    - fmt: TrialFormat with reference label and optional registered label order.

    Returns:
        - tuple of Treatment objects, index 0 being the reference.
    """
    if fmt.treatments is not None:
        registered = list(fmt.treatments)
        if len(set(registered)) != len(registered):
            raise ConfigError(f"Registered treatment labels must be unique. Got {registered}")
        if fmt.reference not in registered:
            raise ConfigError(f"Reference '{fmt.reference}' is not among registered treatments {registered}.")
        unknown = sorted(set(labels) - set(registered))
        if unknown:
            raise NetworkDataError(f"Unknown treatment label(s) {unknown}; registered labels are {registered}.")
        ordered = [fmt.reference] + [label for label in registered if label != fmt.reference]
    else:
        ordered = [fmt.reference] + sorted(set(labels) - {fmt.reference})

    return tuple(Treatment(id=idx, label=label) for idx, label in enumerate(ordered))


def _read_table(source: Union[str, IO], fmt: TrialFormat) -> pd.DataFrame:
    """Read raw table as strings. Empty input gives an empty DataFrame."""
    try:
        table = pd.read_csv(source, sep=fmt.delimiter, dtype=str, keep_default_na=False, skipinitialspace=True,
                            encoding="utf-8")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=REQUIRED_COLUMNS)
    except pd.errors.ParserError as e:
        raise TrialParseError(f"Malformed input: {e}") from e

    table.columns = [str(col).strip().lower() for col in table.columns]
    missing = [col for col in REQUIRED_COLUMNS if col not in table.columns]
    if missing:
        raise TrialParseError(f"Missing required column(s) {missing}. Found {list(table.columns)}.", line=1)

    return table


def _parse_number(value: str, name: str, line: int) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise TrialParseError(f"Column '{name}' must be numeric, got '{value}'.", line=line) from None
    if not np.isfinite(number):
        raise TrialParseError(f"Column '{name}' must be finite, got '{value}'.", line=line)
    return number


def parse_trials(source: Union[str, IO], fmt: TrialFormat = TrialFormat()) -> List[Trial]:
    """
    Parse long-format arm table into trials.

    Params:
    - source: path or text stream with header row and columns study, year, treatment, events, size (optional id).
    - fmt: TrialFormat object.

    Returns:
        - list of Trial objects in order of first appearance of each trial. Arms keep input order.
    """
    table = _read_table(source, fmt)
    if table.empty:
        return []

    has_id = ID_COLUMN in table.columns
    rows = []

    for row_num, row in enumerate(table.itertuples(index=False)):
        line = row_num + 2  # header is line 1
        record = row._asdict()

        study, treatment = str(record["study"]).strip(), str(record["treatment"]).strip()
        if study == "" or treatment == "":
            raise TrialParseError("Columns 'study' and 'treatment' must be non-empty.", line=line)

        events = _parse_number(record["events"], "events", line)
        size = _parse_number(record["size"], "size", line)
        if size <= 0:
            raise TrialParseError(f"Arm size must be positive, got {size}.", line=line)
        if events < 0 or events > size:
            raise TrialParseError(f"Events must lie in [0, size]; got events={events}, size={size}.", line=line)

        year_str = str(record["year"]).strip()
        year = int(_parse_number(year_str, "year", line)) if year_str != "" else None

        if has_id:
            id_str = str(record[ID_COLUMN]).strip()
            key = int(_parse_number(id_str, ID_COLUMN, line))
        else:
            key = (study, year)

        rows.append({"key": key, "study": study, "year": year, "treatment": treatment, "events": events,
                     "size": size, "line": line})

    coding = treatment_coding([row["treatment"] for row in rows], fmt)
    by_label = {treatment.label: treatment for treatment in coding}

    # Group by trial key preserving order of first appearance
    grouped: Dict = {}
    for row in rows:
        entry = grouped.setdefault(row["key"], {"study": row["study"], "year": row["year"], "arms": [],
                                                "seen": set()})
        if row["treatment"] in entry["seen"]:
            raise TrialParseError(f"Duplicate treatment '{row['treatment']}' in trial '{row['study']}'.",
                                  line=row["line"])
        entry["seen"].add(row["treatment"])
        entry["arms"].append(TrialArm(treatment=by_label[row["treatment"]], events=row["events"], size=row["size"]))

    trials = []
    for position, (key, entry) in enumerate(grouped.items()):
        trial_id = key if has_id else position + 1
        trials.append(Trial(id=trial_id, label=entry["study"], arms=tuple(entry["arms"]), year=entry["year"]))

    for trial in trials:
        if len(trial.arms) < 2:
            raise NetworkDataError(f"Trial '{trial.label}' (id {trial.id}) has fewer than 2 arms.")

    return trials


def treatments_of(trials: Sequence[Trial], fmt: TrialFormat = TrialFormat()) -> Tuple[Treatment, ...]:
    """Recompute the treatment coding of parsed trials (reference included even when absent from the data)."""
    labels = [arm.treatment.label for trial in trials for arm in trial.real_arms]
    return treatment_coding(labels, fmt)


# ---------------------------------------------------------------------------------------
"Network graph"


def validate_network(trials: Sequence[Trial], treatments: Optional[Sequence[Treatment]] = None) -> NetworkSummary:
    """
    Build the treatment comparison graph and check that it is connected.

    Params:
    - trials: list of Trial objects. Pseudo-arms are ignored.
    - treatments: optional full list of treatments that must all be reachable. Treatments absent from the trials
    then show up as isolated components. Defaults to the treatments observed in the trials.

    Returns:
        - NetworkSummary object.

    Raises DisconnectedNetworkError if the graph has more than one component.
    """
    if len(trials) == 0:
        raise NetworkDataError("Cannot validate an empty trial list.")

    if treatments is None:
        observed = {arm.treatment for trial in trials for arm in trial.real_arms}
        treatments = sorted(observed, key=lambda t: t.id)

    nodes = tuple(treatments)
    position = {treatment.id: pos for pos, treatment in enumerate(nodes)}

    edges: Dict[Tuple[int, int], int] = {}
    trial_counts = {treatment.id: 0 for treatment in nodes}
    participants = {treatment.id: 0.0 for treatment in nodes}

    for trial in trials:
        ids = [arm.treatment.id for arm in trial.real_arms]
        for arm in trial.real_arms:
            if arm.treatment.id not in position:
                raise NetworkDataError(f"Trial '{trial.label}' uses treatment '{arm.treatment.label}' outside the "
                                       f"given treatment list.")
            trial_counts[arm.treatment.id] += 1
            participants[arm.treatment.id] += arm.size

        for id_a, id_b in itertools.combinations(sorted(ids), 2):
            edges[(id_a, id_b)] = edges.get((id_a, id_b), 0) + 1

    # Connected components of the undirected graph
    num_nodes = len(nodes)
    if edges:
        rows = [position[a] for a, _ in edges] + [position[b] for _, b in edges]
        cols = [position[b] for _, b in edges] + [position[a] for a, _ in edges]
        adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
    else:
        adjacency = coo_matrix((num_nodes, num_nodes))
    num_comps, labels = connected_components(adjacency, directed=False)

    components = [tuple(nodes[pos] for pos in np.flatnonzero(labels == comp)) for comp in range(num_comps)]

    summary = NetworkSummary(nodes=nodes, edges=edges, trial_counts=trial_counts, participants=participants,
                             n_trials=len(trials), total_participants=float(sum(t.participants for t in trials)),
                             components=components)

    if not summary.connected:
        raise DisconnectedNetworkError([{treatment.label for treatment in comp} for comp in components])

    return summary


def is_connected(trials: Sequence[Trial], treatments: Sequence[Treatment]) -> bool:
    """Boolean version of validate_network."""
    if len(trials) == 0:
        return False
    try:
        validate_network(trials, treatments)
    except DisconnectedNetworkError:
        return False
    return True
