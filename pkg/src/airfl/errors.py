"""Exception types shared across the package."""


class AirflError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(AirflError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(AirflError, ValueError):
    """Dimension mismatch between vector-valued arguments."""


class FormatError(AirflError, ValueError):
    """A file does not conform to its declared binary format.

    The message names the byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateTaskError(AirflError):
    """A generated task is numerically unusable (e.g. singular Gram matrix)."""


class DegenerateSignalError(AirflError):
    """All transmit signals are zero, so a norm-based denoising factor is undefined."""


class SingularChannelError(AirflError):
    """Channel inversion was requested on a (near-)zero channel coefficient."""


class NumericError(AirflError):
    """An iterative numerical routine failed to converge."""


class HypothesisViolationError(AirflError):
    """Inputs violate the hypothesis of the theorem being evaluated.

    ``rounds`` lists the offending rounds when the violation is per-round.
    """

    def __init__(self, message, rounds=None):
        super().__init__(message)
        self.rounds = tuple(rounds) if rounds is not None else ()


class ValidationError(AirflError, ValueError):
    """An experiment configuration failed validation.

    Collects every failed field so a config can be fixed in one pass.
    """

    def __init__(self, problems):
        self.problems = tuple(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
