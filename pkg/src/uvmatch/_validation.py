"""Input validation helpers shared across the estimators and functions."""

from __future__ import annotations

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    NaNInputError,
)


def check_matrix(X, name: str = "X", dtype=np.float32, allow_empty: bool = False) -> np.ndarray:
    """Coerce ``X`` to a 2-d contiguous array and validate it.

    Raises
    ------
    EmptyInputError
        If the array has zero rows and ``allow_empty`` is false.
    NaNInputError
        If any entry is NaN or infinite.
    """
    X = np.ascontiguousarray(X, dtype=dtype)
    if X.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-d, got shape {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise EmptyInputError(f"{name} has no rows")
    if X.size and not np.all(np.isfinite(X)):
        raise NaNInputError(f"{name} contains NaN or infinite values")
    return X


def check_same_dim(A: np.ndarray, B: np.ndarray, what: str = "inputs") -> None:
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatchError(
            f"{what} disagree on dimension: {A.shape[1]} vs {B.shape[1]}"
        )


def check_seed(seed) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return seed
