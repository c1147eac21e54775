"""Exception hierarchy shared across the package.

Every error raised by library code derives from GeoprevError so callers
(and the CLI) can distinguish usage problems from genuine bugs.
"""

from __future__ import annotations


class GeoprevError(Exception):
    """Base class for all package errors."""


# -- geometry ------------------------------------------------------------

class DegenerateGeometry(GeoprevError):
    """Hull input has fewer than 3 distinct points or is collinear."""


class EmptyGrid(GeoprevError):
    """No lattice point of the requested spacing falls inside the region."""


# -- covariance ----------------------------------------------------------

class NotPositiveDefinite(GeoprevError):
    """Covariance matrix failed its Cholesky factorization.

    With a zero nugget this usually signals duplicate locations.
    """


class InvalidAlpha(GeoprevError):
    """Cross-survey correlation outside (-1, 1) for a differing-time pair."""


# -- model evaluation ----------------------------------------------------

class MissingCovariate(GeoprevError):
    """A record or raster row lacks a covariate named by the model."""


class NoBiasComponent(GeoprevError):
    """Bias-surface prediction requested from a model without a bias effect."""


# -- inference -----------------------------------------------------------

class NoConvergence(GeoprevError):
    """Iterative routine exhausted its budget before meeting tolerance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class HessianIndefinite(GeoprevError):
    """Negative Hessian at the candidate mode is not positive definite."""


class DivergentChain(GeoprevError):
    """MCMC log-density became non-finite."""


class SingularInformation(GeoprevError):
    """Observed information matrix is singular; names the weak parameters."""

    def __init__(self, message: str, parameters: list[str] | None = None):
        super().__init__(message)
        self.parameters = parameters or []


# -- prediction ----------------------------------------------------------

class SingularConditioning(GeoprevError):
    """Conditioning covariance is degenerate beyond the coincident-site case."""


# -- scenarios -----------------------------------------------------------

class InfeasibleFrame(GeoprevError):
    """Village enumeration cannot host the required number of children."""


class EmptyEmpiricalDistribution(GeoprevError):
    """No sampled households available to resample covariates from."""


# -- data / config -------------------------------------------------------

class ParseError(GeoprevError):
    """CSV ingestion failure, pinned to a row and column."""

    def __init__(self, row: int, column: str, reason: str):
        super().__init__(f"row {row}, column {column!r}: {reason}")
        self.row = row
        self.column = column
        self.reason = reason


class ConfigError(GeoprevError):
    """Configuration file is syntactically or semantically invalid."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
