"""Exception hierarchy.

Every error carries a stable class name so the CLI can print a one-line,
machine-parseable ``error: <Class>: <message>`` record.
"""


class KnapSpecError(Exception):
    """Base class for all package errors."""


class InputError(KnapSpecError, ValueError):
    pass


class ContractError(KnapSpecError, ValueError):
    """A precondition or shape contract was violated."""


class NumericError(KnapSpecError, ArithmeticError):
    pass


class FitError(KnapSpecError, ValueError):
    pass


class ProfileError(KnapSpecError, ValueError):
    pass


class TableLookupError(KnapSpecError, LookupError):
    pass


class SelectionError(KnapSpecError, RuntimeError):
    """No usable draft configuration could be selected."""


class RefusalError(KnapSpecError, ValueError):
    """Request exceeds an enumeration bound."""


class HypothesisError(KnapSpecError, ValueError):
    """Inputs do not satisfy the hypothesis of the margin lemma."""


class StatError(KnapSpecError, ValueError):
    pass


class ConsistencyError(KnapSpecError, RuntimeError):
    """Internal cache bookkeeping went out of sync."""


class ConfigError(KnapSpecError, ValueError):
    pass


class ReportError(KnapSpecError, ValueError):
    pass


class FormatError(KnapSpecError, ValueError):
    """Malformed tensor, profile or log file."""
