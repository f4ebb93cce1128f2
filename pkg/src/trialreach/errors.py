"""Exception and warning types shared across the package."""

from __future__ import annotations


class TrialReachError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(TrialReachError):
    """A covariate schema is malformed or a value violates it."""


class RoleError(SchemaError):
    """A column appears on a side where its role forbids it."""


class ParseError(TrialReachError):
    """A CSV cell could not be parsed as its declared kind."""


class HarmonizeError(TrialReachError):
    """Trial and target tables cannot be reconciled."""


class DataError(TrialReachError):
    """A table violates a structural precondition."""


class MissingDataError(TrialReachError):
    """Missing values present where a complete matrix is required."""


class EstimationError(TrialReachError):
    """Model fitting or effect estimation failed."""


class DegenerateDataError(EstimationError):
    """Inputs lack the variation needed to estimate anything."""


class PolicyError(TrialReachError):
    """A weight-handling policy is invalid."""


class BootstrapError(EstimationError):
    """Too many bootstrap replicates failed."""


class ImputationError(TrialReachError):
    """Multiple imputation could not proceed."""


class ConfigError(TrialReachError):
    """A run configuration is invalid.

    Carries the full list of violations so callers can report all of
    them at once.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DgpError(TrialReachError):
    """A synthetic-data specification cannot be realized."""


class RankDeficiencyWarning(UserWarning):
    """Design matrix is rank deficient; redundant columns dropped."""


class SeparationWarning(UserWarning):
    """Logistic fit shows signs of (quasi-)separation."""


class RidgeFallbackWarning(UserWarning):
    """Singular information matrix stabilized with a small ridge."""


class DroppedCovariateWarning(UserWarning):
    """A covariate was dropped during harmonization."""


class AnalysisWarning(UserWarning):
    """A non-fatal analysis condition worth surfacing in the report."""
