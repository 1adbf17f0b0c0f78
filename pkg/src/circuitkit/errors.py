"""Exception types raised across the package."""


class CircuitKitError(Exception):
    """Base class for all package errors."""


class UsageError(CircuitKitError, ValueError):
    pass


class DimensionError(CircuitKitError, ValueError):
    pass


class NumericError(CircuitKitError, FloatingPointError):
    pass


class UnknownSlotError(CircuitKitError, KeyError):
    pass


class IdentifierError(CircuitKitError, KeyError):
    pass


class VocabError(CircuitKitError, ValueError):
    pass


class ContextError(CircuitKitError, ValueError):
    pass


class FormatError(CircuitKitError, ValueError):
    pass


class PairingError(CircuitKitError, ValueError):
    pass


class SpecError(CircuitKitError, ValueError):
    pass


class CoverageError(CircuitKitError, RuntimeError):
    pass


class TrainingError(CircuitKitError, RuntimeError):
    pass
