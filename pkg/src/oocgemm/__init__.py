"""Out-of-core sparse matrix-matrix multiplication on block storage."""

from .core import (
    Accumulator,
    SparseMatrix,
    SparseRow,
    accumulate,
    scale_row,
    spgemm_in_memory,
    spgemm_reference,
)
from .errors import (
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    OutOfStorageError,
    RowNotFoundError,
    StorageError,
)

__version__ = "0.1.0"

__all__ = [
    "Accumulator",
    "SparseMatrix",
    "SparseRow",
    "accumulate",
    "scale_row",
    "spgemm_in_memory",
    "spgemm_reference",
    "Error",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "StorageError",
    "OutOfStorageError",
    "RowNotFoundError",
    "__version__",
]
