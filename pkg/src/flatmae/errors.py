"""Exception types raised across the package."""


class FlatMAEError(Exception):
    """Base class for all package errors."""


class FormatError(FlatMAEError, ValueError):
    """A binary file has a bad magic string, truncated payload or bad dims."""


class ValidationError(FlatMAEError, ValueError):
    """Loaded or constructed data violates a type invariant."""


class DimensionError(FlatMAEError, ValueError):
    """Array shapes do not agree."""


class ConfigurationError(FlatMAEError, ValueError):
    pass


class EmptyMeshError(FlatMAEError, ValueError):
    pass


class InsufficientDataError(FlatMAEError, ValueError):
    pass


class RangeError(FlatMAEError, IndexError):
    pass


class NumericFault(FlatMAEError, FloatingPointError):
    """A NaN or Inf appeared in a forward pass, gradient or optimizer update."""


class GridMismatchError(FlatMAEError, ValueError):
    """Shard and grid (or checkpoint) were produced from different grids."""
