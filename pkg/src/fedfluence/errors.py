"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""

from __future__ import annotations


class FedfluenceError(Exception):
    exit_code = 1


class ConfigError(FedfluenceError, ValueError):
    exit_code = 2


class FormatError(ConfigError):
    """Malformed federation file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(FedfluenceError, ValueError):
    exit_code = 2


class EmptyInputError(FedfluenceError, ValueError):
    exit_code = 2


class CapacityError(FedfluenceError):
    exit_code = 4


class DivergenceError(FedfluenceError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, round: int | None = None,
                 client: int | None = None, iteration: int | None = None):
        self.round = round
        self.client = client
        self.iteration = iteration
        super().__init__(message)


class InfluenceOverflowError(FedfluenceError, ArithmeticError):
    exit_code = 3

    def __init__(self, client: int, layer: int, round: int, value: float):
        self.client = client
        self.layer = layer
        self.round = round
        self.value = value
        super().__init__(
            f"estimated influence overflow for client {client}, layer {layer}, "
            f"round {round} (max |eps| = {value:.3g})"
        )


class DegenerateRoundError(FedfluenceError, ValueError):
    exit_code = 2


class ComparisonError(FedfluenceError, ValueError):
    exit_code = 2


class UndefinedCorrelationError(FedfluenceError, ValueError):
    exit_code = 2
