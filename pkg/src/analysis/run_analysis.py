#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
End-to-end analysis: load trials, fit, compute diagnostics, calibrate them by bootstrap, re-analyse without the
flagged (or given) trials and write the reports.

Run from the repository root:
    python -m src.analysis.run_analysis --bootstrap 2400 --out results/antihypertensive

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""
import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.errors import AnalysisError, ConfigError, NetworkDataError, NumericalError
from src.data_processing.data_loader import data_loader, excluded_labels
from src.data_processing.data_loading_utils import NetworkData, resolve_trial_ids
from src.data_processing.trials import validate_network
from src.models.model import ModelFit, fit_model, fit_options
from src.models.model_utils import RotatedContrasts, get_objective_from_str
from src.results.bootstrap import BootstrapConfig
from src.results.diagnostics import DiagnosticReport, diagnose, observed_effects
from src.results.main import calibrate
from src.results.results_utils import (LeagueTable, ReportBundle, build_bundle, check_formats, fit_summary,
                                       forest_data, league_table, rank_changes, write_reports)

CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_FILES = {"data": "data_config.json", "model": "model_config.json", "bootstrap": "bootstrap_config.json"}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------------------
"Configuration"


@dataclass
class RunConfig:
    """
    Resolved configuration of one run.

    - data_config, model_config, bootstrap_config: dictionaries as in the JSON configuration files.
    Bootstrap is disabled when bootstrap_config["replicates"] is 0.
    - exclusions: trial ids or labels left out of the sensitivity re-analysis. Empty means the flagged trials.
    - out: output folder.
    - formats: subset of ("tsv", "json").
    - all_comparisons: also report residuals of arm pairs not involving the temporary reference.
    """
    data_config: Dict = field(default_factory=dict)
    model_config: Dict = field(default_factory=dict)
    bootstrap_config: Dict = field(default_factory=dict)
    exclusions: Tuple[str, ...] = ()
    out: str = "results/antihypertensive"
    formats: Tuple[str, ...] = ("tsv", "json")
    all_comparisons: bool = False
    verbose: bool = True

    def __post_init__(self):
        self.model_config = {**self.model_config,
                             "method": get_objective_from_str(self.model_config.get("method", "REML"))}
        self.formats = tuple(check_formats(self.formats))
        self.exclusions = tuple(str(key).strip() for key in self.exclusions if str(key).strip() != "")

        replicates = self.bootstrap_config.get("replicates", 0)
        if not isinstance(replicates, int) or replicates < 0:
            raise ConfigError(f"Number of bootstrap replicates must be a non-negative integer. Got {replicates}.")

    @property
    def bootstrap(self) -> Optional[BootstrapConfig]:
        if self.bootstrap_config.get("replicates", 0) == 0:
            return None
        return BootstrapConfig.from_config(**self.bootstrap_config)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(name: str, config_dir: str = CONFIG_DIR) -> dict:
    """Load one of the JSON configuration files ("data", "model" or "bootstrap")."""
    path = os.path.join(config_dir, CONFIG_FILES[name])
    try:
        with open(path, "r") as f:
            config = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file {path} not found.") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration file {path} is not valid JSON: {e}") from e

    if not isinstance(config, dict):
        raise ConfigError(f"Configuration file {path} must hold a JSON object.")

    return config


def load_run_config(config_dir: str = CONFIG_DIR, **overrides) -> RunConfig:
    """Read the three configuration files of a folder. Keyword overrides go to RunConfig."""
    return RunConfig(data_config=load_config("data", config_dir), model_config=load_config("model", config_dir),
                     bootstrap_config=load_config("bootstrap", config_dir), **overrides)


# ---------------------------------------------------------------------------------------
"Pipeline"


@contextmanager
def stage(name: str):
    """Attach the pipeline stage to errors raised inside the block."""
    try:
        yield
    except AnalysisError as e:
        if e.stage is None:
            e.stage = name
        raise


def load_network(data_config: dict, verbose: bool = False) -> NetworkData:
    try:
        return data_loader(**data_config, verbose=verbose)
    except OSError as e:
        raise NetworkDataError(f"Cannot read input file: {e}") from e


@dataclass
class SensitivityResult:
    """League tables and forest data of the full and reduced networks."""
    excluded: List[int]
    excluded_labels: List[str]
    before: LeagueTable
    after: LeagueTable
    forest_before: pd.DataFrame
    forest_after: pd.DataFrame
    ranks: pd.DataFrame
    fit_after: ModelFit


def sensitivity_analysis(config: RunConfig, exclusions: Sequence, network: Optional[NetworkData] = None,
                         fit: Optional[ModelFit] = None) -> SensitivityResult:
    """
    Refit the model without some trials and compare league tables and treatment ranking.

    Params:
    - config: RunConfig object.
    - exclusions: trial ids or labels to exclude. Empty gives an after-table equal to the before-table.
    - network: prepared NetworkData. Loaded from config.data_config if None.
    - fit: baseline fit of the full network. Computed if None.

    Returns:
        - SensitivityResult object. Raises DisconnectedNetworkError if the remaining network is disconnected.
    """
    network = load_network(config.data_config) if network is None else network
    options = {**fit_options(**config.model_config), "method": config.model_config["method"]}
    fit = fit_model(network.contrasts, num_treatments=network.num_treatments, **options) if fit is None else fit

    excluded = resolve_trial_ids(network.trials, exclusions)
    reduced = network.without(excluded)

    if excluded:
        if len(reduced.trials) == 0:
            raise NetworkDataError("Exclusions leave no trials.")
        validate_network(list(reduced.raw_trials), network.treatments)
        fit_after = fit_model(reduced.contrasts, num_treatments=reduced.num_treatments, **options)
    else:
        fit_after = fit

    forest_before, forest_after = forest_data(fit, network), forest_data(fit_after, reduced)

    return SensitivityResult(excluded=excluded, excluded_labels=excluded_labels(network, excluded),
                             before=league_table(fit, network), after=league_table(fit_after, reduced),
                             forest_before=forest_before, forest_after=forest_after,
                             ranks=rank_changes(forest_before, forest_after), fit_after=fit_after)


def run_analysis(config: RunConfig) -> ReportBundle:
    """
    Run the full pipeline and write reports to config.out.

    Params:
    - config: RunConfig object.

    Returns:
        - ReportBundle written to disk.
    """
    verbose = config.verbose

    with stage("config"):
        bootstrap = config.bootstrap

    with stage("ingest"):
        network = load_network(config.data_config, verbose=verbose)

    with stage("fit"):
        options = {**fit_options(**config.model_config), "method": config.model_config["method"]}
        rotated = RotatedContrasts.from_contrasts(network.contrasts, network.num_treatments)
        fit = fit_model(rotated, **options)
        if verbose:
            print(f"\n{fit.method} heterogeneity SD: {fit.tau:.4f}")

    with stage("diagnostics"):
        report: DiagnosticReport = diagnose(network, all_comparisons=True, fit_options=options, rotated=rotated,
                                            fit=fit)

    if bootstrap is not None:
        with stage("bootstrap"):
            report = calibrate(network, report, bootstrap, model_config=options, verbose=verbose)

    with stage("sensitivity"):
        exclusions = list(config.exclusions) if config.exclusions else [str(t) for t in report.flagged_trials]
        sensitivity = sensitivity_analysis(config, exclusions, network=network, fit=report.fit)
        if verbose:
            print(f"\nSensitivity analysis excluding {sensitivity.excluded_labels}: "
                  f"heterogeneity SD {sensitivity.fit_after.tau:.4f}")

    with stage("report"):
        bundle = build_bundle(network, report, observed=observed_effects(network),
                              all_comparisons=config.all_comparisons)

        bundle.summary.update({"method": report.fit.method,
                               "bootstrap_seed": None if bootstrap is None else bootstrap.seed,
                               "sensitivity_excluded_ids": sensitivity.excluded,
                               "sensitivity_excluded": sensitivity.excluded_labels,
                               "sensitivity_num_trials": len(network.trials) - len(sensitivity.excluded),
                               **fit_summary(sensitivity.fit_after, "sensitivity")})
        bundle.tables.update({"sensitivity_league_table": sensitivity.after.to_frame(),
                              "sensitivity_forest": sensitivity.forest_after, "sensitivity_ranks": sensitivity.ranks})

        write_reports(bundle, config.out, formats=config.formats)
        with open(os.path.join(config.out, "run_config.json"), "w", encoding="utf-8", newline="\n") as f:
            json.dump(config.to_dict(), f, indent=2)
            f.write("\n")

    if verbose:
        print(f"\nFlagged trials: {bundle.summary['flagged_trials']}")
        print(f"Results saved under {config.out}")

    return bundle


# ---------------------------------------------------------------------------------------
"Command line"


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _comma_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip() != ""]


def _non_negative_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got '{value}'") from None
    if number < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got '{value}'")
    return number


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="run_analysis", description="Outlier and influence diagnostics for network "
                                                             "meta-analysis of odds ratios.")
    parser.add_argument("--input", help="long-format arm table (study, year, treatment, events, size[, id])")
    parser.add_argument("--reference", help="label of the reference treatment")
    parser.add_argument("--method", type=str.upper, choices=["REML", "ML"], help="estimation method")
    parser.add_argument("--bootstrap", type=_non_negative_int, metavar="B",
                        help="number of bootstrap replicates (0 disables the bootstrap)")
    parser.add_argument("--seed", type=_non_negative_int, help="bootstrap seed")
    parser.add_argument("--exclude", type=_comma_list, default=[], metavar="ID,...",
                        help="trials left out of the sensitivity analysis (default: flagged trials)")
    parser.add_argument("--out", default="results/antihypertensive", help="output folder")
    parser.add_argument("--format", type=_comma_list, default=["tsv", "json"], metavar="tsv,json",
                        help="output formats")
    parser.add_argument("--config-dir", default=CONFIG_DIR, help="folder holding the JSON configuration files")
    parser.add_argument("--all-comparisons", action="store_true",
                        help="report residuals of every arm pair of multi-arm trials")
    parser.add_argument("--n-jobs", type=int, help="bootstrap worker count (-1 for all cores)")
    parser.add_argument("--quiet", action="store_true", help="no progress output")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Configuration files overridden by command line flags."""
    data_config = load_config("data", args.config_dir)
    model_config = load_config("model", args.config_dir)
    bootstrap_config = load_config("bootstrap", args.config_dir)

    overrides = [(data_config, "input_path", args.input), (data_config, "reference", args.reference),
                 (model_config, "method", args.method), (bootstrap_config, "replicates", args.bootstrap),
                 (bootstrap_config, "seed", args.seed), (bootstrap_config, "n_jobs", args.n_jobs)]
    for config, key, value in overrides:
        if value is not None:
            config[key] = value

    return RunConfig(data_config=data_config, model_config=model_config, bootstrap_config=bootstrap_config,
                     exclusions=tuple(args.exclude), out=args.out, formats=tuple(args.format),
                     all_comparisons=args.all_comparisons, verbose=not args.quiet)


def exit_code(error: AnalysisError) -> int:
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(error, NetworkDataError):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        with stage("config"):
            config = config_from_args(args)
        run_analysis(config)
    except AnalysisError as e:
        print(f"Analysis failed at stage '{e.stage}': {e}", file=sys.stderr)
        return exit_code(e)

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
