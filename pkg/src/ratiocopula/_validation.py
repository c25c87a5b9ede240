import numpy as np

from .exceptions import ValidationError


def check_matrix(X, name="X", min_rows=1, n_features=None):
    """Return ``X`` as a finite 2-D float64 array.

    Non-finite entries are reported with their row and column index so that
    bad records in a CSV can be located.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if n_features in (None, 1) else X.reshape(1, -1)
    if X.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValidationError(
            f"{name} needs at least {min_rows} rows, got {X.shape[0]}"
        )
    if X.shape[1] < 1:
        raise ValidationError(f"{name} has no columns")
    if n_features is not None and X.shape[1] != n_features:
        raise ValidationError(
            f"{name} has {X.shape[1]} columns, expected {n_features}"
        )
    bad = ~np.isfinite(X)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"{name} has a non-finite value in dimension {col} at row {row}"
        )
    return X


def check_unit_open(U, name="U", n_features=None):
    """Return ``U`` as a 2-D array with every entry strictly inside (0, 1)."""
    U = check_matrix(U, name=name, n_features=n_features)
    bad = (U <= 0.0) | (U >= 1.0)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"{name}[{row}, {col}] = {U[row, col]!r} is outside the open unit interval"
        )
    return U
