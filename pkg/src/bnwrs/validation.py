"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

__all__ = ["as_float_matrix", "as_sample_vector"]


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    """Validate a 2-D float64 feature matrix with finite entries."""
    return check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)


def as_sample_vector(x, min_samples: int = 1, name: str = "x") -> np.ndarray:
    """Validate a 1-D float64 sample vector (column vectors are flattened)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D samples, got shape {arr.shape}")
    if arr.size < min_samples:
        raise ValueError(f"{name} needs at least {min_samples} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
