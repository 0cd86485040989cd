"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration errors to 1, data and
format errors to 2, numerical aborts to 3.
"""


class VillaError(Exception):
    exit_code = 1


class ConfigError(VillaError, ValueError):
    exit_code = 1


class DimensionError(VillaError, ValueError):
    exit_code = 1


class MaskedRowError(VillaError, ValueError):
    exit_code = 1


class EvaluationError(VillaError, ArithmeticError):
    exit_code = 3


class EmptyContextError(VillaError, ValueError):
    exit_code = 1


class EncodingError(VillaError, KeyError):
    exit_code = 2

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class GenerationError(VillaError, RuntimeError):
    exit_code = 2


class FormatError(VillaError, ValueError):
    exit_code = 2


class NumericalAbort(VillaError, FloatingPointError):
    exit_code = 3
