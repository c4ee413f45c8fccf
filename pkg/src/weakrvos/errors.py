"""Exception types shared across the package.

The CLI maps these to process exit codes (DataError -> 3, NumericError -> 4),
so library code should raise them instead of bare ValueError whenever the
failure is caused by user-supplied data or by numerical breakdown.
"""


class WeakRvosError(Exception):
    """Base class for package errors."""


class DataError(WeakRvosError):
    """Malformed dataset, manifest, annotation or config input."""


class NumericError(WeakRvosError):
    """NaN/Inf or other numerical failure during training or evaluation."""
