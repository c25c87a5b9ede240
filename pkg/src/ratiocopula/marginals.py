"""Empirical marginal transforms between data, pseudo-observations and the
latent standard-normal scale."""

import warnings

import numpy as np
from scipy.special import ndtr, ndtri
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_unit_open
from .exceptions import ValidationError

__all__ = [
    "EmpiricalMarginals",
    "fit_marginals",
    "to_pseudo",
    "pseudo_to_latent",
    "latent_to_pseudo",
    "pseudo_to_data",
]

# Largest double below 1 and smallest positive normal double: the images of
# latent_to_pseudo are clipped here so they stay strictly inside (0, 1).
_U_MAX = np.nextafter(1.0, 0.0)
_U_MIN = np.finfo(np.float64).tiny


def pseudo_to_latent(U):
    """Map pseudo-observations to the latent scale with the normal quantile.

    Parameters
    ----------
    U : array-like of shape (n_samples, n_features)
        Values strictly inside (0, 1).

    Returns
    -------
    Z : ndarray of shape (n_samples, n_features)
    """
    U = check_unit_open(U)
    return ndtri(U)


def latent_to_pseudo(Z):
    """Map latent values to (0, 1) with the standard normal CDF."""
    Z = check_matrix(Z, name="Z")
    return np.clip(ndtr(Z), _U_MIN, _U_MAX)


def _cdf_knots(sorted_col):
    # Distinct values and their average 1-based ranks; ties share the mean rank.
    values, first, counts = np.unique(sorted_col, return_index=True, return_counts=True)
    avg_rank = first + 1 + (counts - 1) / 2.0
    return values, avg_rank


class EmpiricalMarginals(TransformerMixin, BaseEstimator):
    """Per-dimension empirical CDFs.

    Training points map to ``rank / (n + 1)`` with average ranks for ties.
    New points are placed by linear interpolation of that step function,
    clamped to ``[1 / (2 (n + 1)), 1 - 1 / (2 (n + 1))]`` so that the latent
    transform never returns infinities.

    Parameters
    ----------
    output : {"pseudo", "latent"}, default="pseudo"
        Scale returned by :meth:`transform`. ``"latent"`` additionally applies
        the standard normal quantile.

    Attributes
    ----------
    sorted_values_ : ndarray of shape (n_samples, n_features)
        Each column holds the sorted training values of that dimension.
    n_samples_ : int
    n_features_in_ : int
    constant_columns_ : ndarray of bool
        Dimensions with a single distinct value; they always map to 0.5.
    """

    def __init__(self, output="pseudo"):
        self.output = output

    def fit(self, X, y=None):
        X = check_matrix(X, min_rows=2)
        self._set_sorted(np.sort(X, axis=0))
        if self.constant_columns_.any():
            cols = np.flatnonzero(self.constant_columns_).tolist()
            warnings.warn(
                f"constant columns {cols} carry no dependence information; "
                "they map to 0.5",
                RuntimeWarning,
                stacklevel=2,
            )
        return self

    @classmethod
    def from_sorted(cls, sorted_values, output="pseudo"):
        """Rebuild a fitted instance from stored sorted columns."""
        est = cls(output=output)
        est._set_sorted(check_matrix(sorted_values, name="sorted_values", min_rows=2))
        return est

    def _set_sorted(self, sorted_values):
        if np.any(np.diff(sorted_values, axis=0) < 0):
            raise ValidationError("sorted_values columns must be ascending")
        self.sorted_values_ = sorted_values
        self.n_samples_, self.n_features_in_ = sorted_values.shape
        self.constant_columns_ = sorted_values[0] == sorted_values[-1]
        self._knots = [_cdf_knots(col) for col in sorted_values.T]

    def cdf(self, X):
        """Pseudo-observations of ``X`` under the fitted marginals."""
        check_is_fitted(self, "sorted_values_")
        X = check_matrix(X, n_features=self.n_features_in_)
        n = self.n_samples_
        lo = 0.5 / (n + 1)
        U = np.empty_like(X)
        for j, (values, ranks) in enumerate(self._knots):
            if self.constant_columns_[j]:
                U[:, j] = 0.5
                continue
            U[:, j] = np.interp(X[:, j], values, ranks / (n + 1), left=lo, right=1 - lo)
        return np.clip(U, lo, 1 - lo)

    def quantile(self, U):
        """Inverse empirical CDF, interpolating linearly between order statistics."""
        check_is_fitted(self, "sorted_values_")
        U = check_unit_open(U, n_features=self.n_features_in_)
        n = self.n_samples_
        nodes = np.arange(1, n + 1) / (n + 1)
        X = np.empty_like(U)
        for j in range(self.n_features_in_):
            X[:, j] = np.interp(U[:, j], nodes, self.sorted_values_[:, j])
        return X

    def transform(self, X):
        U = self.cdf(X)
        if self.output == "latent":
            return ndtri(U)
        if self.output != "pseudo":
            raise ValidationError(f"unknown output scale {self.output!r}")
        return U

    def inverse_transform(self, X):
        if self.output == "latent":
            X = latent_to_pseudo(X)
        return self.quantile(X)


def fit_marginals(X):
    """Fit :class:`EmpiricalMarginals` to a data matrix."""
    return EmpiricalMarginals().fit(X)


def to_pseudo(X, marginals):
    """Pseudo-observations of ``X`` under fitted ``marginals``."""
    return marginals.cdf(X)


def pseudo_to_data(U, marginals):
    """Map pseudo-observations back to the data scale."""
    return marginals.quantile(U)
