"""Exception hierarchy shared by the library and the CLI."""


class CoditeError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class ArgumentError(CoditeError, ValueError):
    """Invalid argument (shape, range, type)."""


class DegenerateInputError(CoditeError, ValueError):
    """Input is well-formed but too degenerate to analyse."""


class SchemaError(CoditeError, ValueError):
    """A required column or field is missing."""


class ParseError(CoditeError, ValueError):
    """A cell or field could not be parsed."""


class NumericError(CoditeError, ArithmeticError):
    """A factorization or solve failed numerically."""

    exit_code = 3
