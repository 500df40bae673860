"""Exception types shared across the package.

Plain ``ValueError`` is used for argument validation; the classes here mark
failures that callers may want to catch selectively (and that the CLI maps
to distinct exit codes).
"""


class DataLoadError(ValueError):
    """A CSV row could not be parsed; the message names the offending line."""


class SplitError(ValueError):
    """The dataset cannot be partitioned into five date-ordered folds."""


class TrainingError(RuntimeError):
    """Model training could not start or complete."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during optimization."""


class SearchError(RuntimeError):
    """Every grid-search candidate failed; carries per-candidate diagnostics."""
