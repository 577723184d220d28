"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible with an operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or was fed non-finite values."""


class DataError(ValueError):
    """Dataset, transcript, folding-table or file-format problem."""


class ChecksumError(DataError):
    """Stored checksum does not match the file contents."""


class VersionError(DataError):
    """File carries an unsupported format version."""


class CtcInfeasibleError(ValueError):
    """Label sequence cannot be aligned to the given number of frames."""


class SubsetInfeasibleError(DataError):
    """Supervised subset constraints cannot be met with the available data."""


class ConfigError(ValueError):
    """Run configuration file is malformed or contains unknown/invalid keys."""
