"""Exception hierarchy shared across the package.

The three bases map onto the CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, inconsistent geometry."""


class DataError(ValueError):
    """Malformed or missing on-disk data: datasets, checkpoints, matrices."""


class NumericError(ArithmeticError):
    """Numeric failure: divergence, non-convergence, infeasible target."""


class SvdConvergenceError(NumericError):
    """Jacobi sweeps exhausted before the off-diagonal tolerance was met."""


class InfeasibleTargetError(NumericError):
    """Label sequence has no alignment of the requested length."""


class MatrixFormatError(DataError):
    """Corrupt or truncated matrix file."""


class CheckpointError(DataError):
    """Corrupt, truncated, or incompatible checkpoint file."""
