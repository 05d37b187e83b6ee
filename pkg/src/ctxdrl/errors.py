"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class CtxDRLError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CtxDRLError, ValueError):
    exit_code = 2


class DataError(CtxDRLError, ValueError):
    exit_code = 3


class NumericError(CtxDRLError, ArithmeticError):
    exit_code = 4


class ShapeError(CtxDRLError, ValueError):
    """Operand shapes are incompatible for a tensor primitive."""

    exit_code = 4
