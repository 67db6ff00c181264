"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line tool:
configuration problems exit with 2, data/file problems with 3 and numeric
failures with 4.  ``code`` is a short stable identifier, distinct per
failure kind, so callers can tell e.g. a dataset version mismatch from a
database version mismatch without parsing messages.
"""


class TSCMError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(TSCMError, ValueError):
    exit_code = 2
    code = "config"


class ShapeError(ConfigError):
    """Operand shapes do not agree."""

    code = "shape"


class DataError(TSCMError):
    exit_code = 3
    code = "data"


class FormatError(DataError):
    """Bad magic bytes, truncated payload or otherwise unparsable file."""

    code = "format"


class VersionMismatchError(DataError):
    code = "version"

    def __init__(self, kind, found, expected):
        self.kind = kind
        self.found = found
        self.expected = expected
        self.code = f"{kind}-version"
        super().__init__(f"{kind} file has format version {found}, expected {expected}")


class IntegrityError(DataError):
    code = "integrity"


class EmptyMiningError(DataError):
    code = "empty-mining"


class NumericError(TSCMError, ArithmeticError):
    exit_code = 4
    code = "numeric"


class NonFiniteError(NumericError):
    code = "non-finite"


class DegenerateInputError(NumericError):
    code = "degenerate"


class FrozenTeacherError(NumericError):
    code = "frozen-teacher"
