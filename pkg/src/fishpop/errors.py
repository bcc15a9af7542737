"""Exception hierarchy shared across the package.

The CLI maps these onto fixed exit codes (see cli_io): scenario/expression
problems -> 2, failed data validation -> 3, numerical failures -> 4,
I/O failures -> 5.
"""


class FishpopError(Exception):
    """Base class for all package-specific errors."""


class ExpressionError(FishpopError):
    """Malformed coefficient expression, or one that cannot be differentiated."""


class ScenarioError(FishpopError):
    """Base class for scenario-file problems."""


class ScenarioSyntaxError(ScenarioError):
    """Scenario text failed to parse (carries line/column when known)."""


class ScenarioSchemaError(ScenarioError):
    """Unknown, missing, or wrongly-typed scenario key."""


class ScenarioSemanticError(ScenarioError):
    """Scenario parsed but violates a model constraint (e.g. length ordering)."""


class GridError(FishpopError):
    """Requested discretization is inconsistent with the domain bounds."""


class DataValidationError(FishpopError):
    """A run was requested on data that fails the model assumptions."""


class NumericalError(FishpopError):
    """Numerical failure during integration (singular system, non-finite state)."""
