"""
Exceptions raised by iontrap
"""

from __future__ import annotations


class IonTrapError(Exception):
    pass


class ConfigError(IonTrapError, ValueError):
    """Invalid parameters, configuration or usage."""


class UnstableTrapError(ConfigError):
    pass


class InputError(ConfigError):
    """Unparseable or empty input file."""


class ConfigMismatchError(IonTrapError, ValueError):
    pass


class NumericalError(IonTrapError, ArithmeticError):
    """A computation could not produce a valid result."""


class IonCollisionError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class ConvergenceError(FitError):
    pass


class DegenerateDataError(FitError):
    pass


class NotBracketedError(FitError):
    pass


class OutOfRangeError(FitError):
    pass
