"""Input validation helpers used by the estimators and public functions."""

from __future__ import annotations

import numbers

import numpy as np


def check_points(X, name: str = "X", allow_empty: bool = False) -> np.ndarray:
    """Coerce ``X`` to a float array of shape (n, 3).

    Two-column input is lifted onto the ground plane (z = 0) and a single
    point may be passed as a flat sequence.
    """
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError(f"{name} must have shape (n, 2) or (n, 3), got {arr.shape}")
    if arr.shape[1] == 2:
        arr = np.column_stack([arr, np.zeros(len(arr))])
    if not allow_empty and len(arr) == 0:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_point(p, name: str = "point") -> np.ndarray:
    return check_points(p, name)[0]


def check_scalar(x, name: str, *, min_val=None, max_val=None, strict_min=False, strict_max=False) -> float:
    if not isinstance(x, numbers.Real) or isinstance(x, bool):
        raise TypeError(f"{name} must be a real number, got {type(x).__name__}")
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"{name} must be finite, got {x}")
    if min_val is not None and (x < min_val or (strict_min and x == min_val)):
        op = ">" if strict_min else ">="
        raise ValueError(f"{name} must be {op} {min_val}, got {x}")
    if max_val is not None and (x > max_val or (strict_max and x == max_val)):
        op = "<" if strict_max else "<="
        raise ValueError(f"{name} must be {op} {max_val}, got {x}")
    return x


def check_matrix(y, n_rows: int, n_cols: int, name: str = "y") -> np.ndarray:
    """Coerce ``y`` to a finite float array of shape (n_rows, n_cols)."""
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 1 and n_cols == 1:
        arr = arr.reshape(-1, 1)
    if arr.shape != (n_rows, n_cols):
        raise ValueError(f"{name} must have shape ({n_rows}, {n_cols}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def horizontal_radius(points: np.ndarray, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    pts = check_points(points, allow_empty=True)
    o = np.asarray(origin, dtype=float)
    return np.hypot(pts[:, 0] - o[0], pts[:, 1] - o[1])
