"""Exception hierarchy.

Everything raised on purpose derives from :class:`DPPError`.  Input problems
also derive from :class:`ValueError`; numerical breakdowns derive from
:class:`NumericalFailure` so callers (and the CLI exit codes) can tell them apart.
"""


class DPPError(Exception):
    """Base class for all package errors."""


class InputError(DPPError, ValueError):
    """Malformed or inconsistent input."""


class NumericalFailure(DPPError, ArithmeticError):
    """A computation broke down numerically."""


class ZeroNormRow(NumericalFailure):
    def __init__(self, index):
        super().__init__(f"row {index} has (near) zero norm and cannot be normalized")
        self.index = index


class NotNormalized(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class TooLarge(InputError):
    pass


class KTooLarge(InputError):
    pass


class SingularConditioning(NumericalFailure):
    pass


class StaleCache(InputError):
    pass


class BadFormat(InputError):
    pass


class VersionMismatch(InputError):
    pass


class TooFewNegatives(InputError):
    pass


class DegeneratePositive(NumericalFailure):
    pass


class TrainingAborted(NumericalFailure):
    pass


class MissingScores(InputError):
    pass


class MissingParams(InputError):
    pass


class EmptyGold(InputError):
    pass


class InvalidConfig(InputError):
    pass
