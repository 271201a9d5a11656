#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Exception classes shared across data processing, model fitting and diagnostics.

The command line entry point maps each family to an exit code:
    - ConfigError -> 1
    - NetworkDataError -> 2
    - NumericalError -> 3
"""
from typing import List, Optional, Set


class AnalysisError(Exception):
    """Base class. The CLI sets 'stage' to name the pipeline step that failed."""

    def __init__(self, message: str = "", stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage


class ConfigError(AnalysisError, ValueError):
    """Invalid configuration parameter."""


class NetworkDataError(AnalysisError, ValueError):
    """Input trial data is malformed or violates a network invariant."""


class TrialParseError(NetworkDataError):
    """Row of the input file could not be parsed. 'line' is 1-based and counts the header."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DisconnectedNetworkError(NetworkDataError):
    """Treatment comparison graph has more than one connected component."""

    def __init__(self, components: List[Set[str]]):
        listing = ", ".join("{" + ", ".join(sorted(comp)) + "}" for comp in components)
        super().__init__(f"Treatment network is disconnected. Components: {listing}")
        self.components = components


class NumericalError(AnalysisError, ArithmeticError):
    """Factorisation or linear solve failed."""


class ConvergenceError(NumericalError):
    """Optimiser did not converge. 'best' holds the best fit found so far."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed."""
