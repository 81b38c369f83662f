"""Exception hierarchy shared across the library.

Each class maps to a distinct CLI exit code so callers scripting the
pipeline can branch on failure type without parsing messages.
"""


class ScopemapError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class MissingInputError(ScopemapError):
    """A referenced file or directory does not exist."""

    exit_code = 2


class FormatError(ScopemapError):
    """A config or data file exists but cannot be parsed."""

    exit_code = 3


class DimensionMismatchError(ScopemapError):
    """Raster sizes, trajectory lengths, or timestamps do not agree."""

    exit_code = 4


class DomainError(ScopemapError):
    """An argument is outside the mathematical domain of the operation."""

    exit_code = 5
