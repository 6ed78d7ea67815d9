"""Exception types raised across the package."""


class KrgenError(Exception):
    """Base class for all package errors."""


class InvalidInput(KrgenError, ValueError):
    pass


class InvalidMatrix(InvalidInput):
    pass


class NotPSD(InvalidMatrix):
    pass


class NotTraceNormalized(InvalidMatrix):
    pass


class NotInvertible(InvalidMatrix):
    pass


class InvalidPartition(InvalidInput):
    pass


class InsufficientSamples(InvalidInput):
    pass


class DegenerateSamples(InvalidInput):
    pass


class DegenerateNoise(InvalidInput):
    pass


class DomainError(InvalidInput):
    pass


class QuadratureFailure(KrgenError, ArithmeticError):
    pass


class TooLarge(InvalidInput):
    pass


class DivergedTraining(KrgenError, ArithmeticError):
    """Training produced a non-finite gradient or parameter."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(KrgenError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(InvalidInput):
    pass
