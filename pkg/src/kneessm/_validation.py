"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .mesh import TriMesh
from .pointset import PointSet


def check_points(X, name: str = "X", min_points: int = 1) -> np.ndarray:
    """Coerce to a finite float array of shape (n_points, 3)."""
    if isinstance(X, PointSet):
        X = X.points
    elif isinstance(X, TriMesh):
        X = X.vertices
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size % 3 == 0:
        X = X.reshape(-1, 3)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n_points, 3), got {X.shape}")
    if len(X) < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_configs(X, name: str = "X", min_configs: int = 1) -> np.ndarray:
    """Coerce corresponded configurations to shape (n_configs, n_points, 3).

    Accepts a list of point sets or an array of shape (n, p, 3) or (n, 3p).
    Unequal cardinalities raise ``ValueError``.
    """
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        arr = np.asarray(X, dtype=float)
        if arr.ndim == 2:
            if arr.shape[1] % 3:
                raise ValueError(f"{name}: flattened configs need 3 * n_points columns")
            arr = arr.reshape(len(arr), -1, 3)
    else:
        items = [check_points(x, f"{name}[{i}]") for i, x in enumerate(X)]
        sizes = {len(x) for x in items}
        if len(sizes) > 1:
            raise ValueError(f"{name}: cardinality mismatch between configurations {sorted(sizes)}")
        arr = np.stack(items) if items else np.empty((0, 0, 3))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (n_configs, n_points, 3)")
    if len(arr) < min_configs:
        raise ValueError(f"{name} needs at least {min_configs} configurations, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name: str, allow_zero: bool = False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return float(value)
