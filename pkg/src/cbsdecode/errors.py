"""Exception hierarchy shared across the package.

The categories map onto the CLI exit codes: configuration problems (65),
data problems (66), and numeric failures (70).
"""


class CbsError(Exception):
    """Base class for all package errors."""


class ConfigError(CbsError):
    """Invalid run configuration (bad flag combination, missing path)."""


class ConstraintError(CbsError):
    """A constraint specification cannot be compiled (unknown token, bad shape)."""


class CapacityError(ConstraintError):
    """A compiled machine would exceed a configured size cap."""


class ContractError(CbsError):
    """A call violated an interface contract (out-of-range state, foreign decode state)."""


class DataError(CbsError):
    """Malformed input data (corpus, embedding file, checkpoint, spec file)."""


class NumericError(CbsError):
    """A numeric computation produced a non-finite or otherwise invalid value."""


class DecodeError(CbsError):
    """Decoding could not produce a usable result."""
