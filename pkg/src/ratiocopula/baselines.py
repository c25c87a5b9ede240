"""Closed-form reference copulas and their classifier (QDA) counterparts."""

import numpy as np
from scipy.special import logsumexp, ndtri
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_unit_open
from .exceptions import ValidationError
from .gaussian import CorrelationMatrix, estimate_correlation, log_mvn_corr, log_mvn_std, sample_mvn
from .marginals import EmpiricalMarginals, latent_to_pseudo

__all__ = [
    "GaussianCopula",
    "KdeCopula",
    "gaussian_copula_logpdf",
    "gaussian_copula_sample",
    "qda_log_ratio",
    "kde_copula_logpdf",
    "kde_as_qda_average",
    "silverman_bandwidth",
]

_LOG_2PI = np.log(2.0 * np.pi)


def _rows(z, d):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z.reshape(1, -1) if single else z
    if Z.shape[1] != d:
        raise ValidationError(f"expected dimension {d}, got {Z.shape[1]}")
    return Z, single


def gaussian_copula_logpdf(corr, U):
    """``log N_d(z; 0, Sigma) - sum_i log N(z_i; 0, 1)`` with ``z = Phi^{-1}(U)``."""
    U = check_unit_open(U, n_features=corr.dim)
    Z = ndtri(U)
    return log_mvn_corr(Z, corr) - log_mvn_std(Z)


def gaussian_copula_sample(corr, n, random_state=None):
    """Pseudo-observations from the Gaussian copula with correlation ``corr``."""
    return latent_to_pseudo(sample_mvn(n, corr, random_state))


def qda_log_ratio(corr, z):
    """QDA log-odds between N(0, Sigma) and N(0, I) at ``z``.

    Evaluates ``-0.5 log|Sigma| - 0.5 z^T (Sigma^{-1} - I) z`` directly from
    the dense inverse and determinant.
    """
    Z, single = _rows(z, corr.dim)
    sign, logdet = np.linalg.slogdet(corr.sigma)
    A = np.linalg.inv(corr.sigma) - np.eye(corr.dim)
    out = -0.5 * logdet - 0.5 * np.einsum("ij,jk,ik->i", Z, A, Z)
    return out[0] if single else out


def silverman_bandwidth(n, d):
    """Silverman's rule of thumb ``(n (d + 2) / 4) ** (-1 / (d + 4))``."""
    if n < 1 or d < 1:
        raise ValidationError("n and d must be at least 1")
    return (n * (d + 2) / 4.0) ** (-1.0 / (d + 4))


def _check_kde(centers, bandwidth):
    centers = check_matrix(centers, name="centers")
    if not bandwidth > 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")
    return centers


def kde_copula_logpdf(centers, bandwidth, U):
    """Log density of the Gaussian-KDE copula at pseudo-observations ``U``.

    ``log[(1/T) sum_k N_d(z; Z^k, b I)] - log N_d(z; 0, I)`` where ``b`` is the
    kernel variance and ``Z^k`` are the latent centers.
    """
    centers = _check_kde(centers, bandwidth)
    U = check_unit_open(U, n_features=centers.shape[1])
    Z = ndtri(U)
    d = Z.shape[1]
    sq = (
        np.einsum("ij,ij->i", Z, Z)[:, None]
        - 2.0 * Z @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    log_kernel = -0.5 * (d * (_LOG_2PI + np.log(bandwidth)) + np.maximum(sq, 0.0) / bandwidth)
    return logsumexp(log_kernel, axis=1) - np.log(len(centers)) - log_mvn_std(Z)


def kde_as_qda_average(centers, bandwidth, z):
    """Log of the average of per-center QDA odds ratios at latent ``z``.

    Each center contributes the odds of a QDA classifier between
    N(Z^k, b I) and N(0, I); the average equals the KDE copula density.
    """
    centers = _check_kde(centers, bandwidth)
    Z, single = _rows(z, centers.shape[1])
    d = Z.shape[1]
    out = np.empty(len(Z))
    for i, zi in enumerate(Z):
        diff = zi - centers
        log_odds = (
            -0.5 * d * np.log(bandwidth)
            - 0.5 * np.sum(diff * diff, axis=1) / bandwidth
            + 0.5 * zi @ zi
        )
        out[i] = logsumexp(log_odds) - np.log(len(centers))
    return out[0] if single else out


class GaussianCopula(DensityMixin, BaseEstimator):
    """Gaussian copula with correlation estimated from latent data.

    Attributes
    ----------
    marginals_ : EmpiricalMarginals
    corr_ : CorrelationMatrix
    n_features_in_ : int
    """

    def fit(self, X, y=None):
        X = check_matrix(X, min_rows=2)
        self.marginals_ = EmpiricalMarginals().fit(X)
        self.corr_ = estimate_correlation(ndtri(self.marginals_.cdf(X)))
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_correlation(cls, sigma):
        est = cls()
        est.corr_ = sigma if isinstance(sigma, CorrelationMatrix) else CorrelationMatrix.from_array(sigma)
        est.marginals_ = None
        est.n_features_in_ = est.corr_.dim
        return est

    def log_pdf(self, U):
        check_is_fitted(self, "corr_")
        return gaussian_copula_logpdf(self.corr_, U)

    def score_samples(self, X):
        check_is_fitted(self, "corr_")
        if self.marginals_ is None:
            return self.log_pdf(X)
        return self.log_pdf(self.marginals_.cdf(X))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        """Pseudo-observations drawn from the fitted copula."""
        check_is_fitted(self, "corr_")
        return gaussian_copula_sample(self.corr_, n_samples, random_state)


class KdeCopula(DensityMixin, BaseEstimator):
    """Gaussian-kernel KDE copula on the latent scale.

    Parameters
    ----------
    bandwidth : float, optional
        Kernel variance. Defaults to :func:`silverman_bandwidth`.

    Attributes
    ----------
    centers_ : ndarray of shape (n_samples, n_features)
    bandwidth_ : float
    """

    def __init__(self, bandwidth=None):
        self.bandwidth = bandwidth

    def fit(self, X, y=None):
        X = check_matrix(X, min_rows=2)
        self.marginals_ = EmpiricalMarginals().fit(X)
        self.centers_ = ndtri(self.marginals_.cdf(X))
        n, d = X.shape
        self.bandwidth_ = float(self.bandwidth) if self.bandwidth is not None else silverman_bandwidth(n, d)
        self.n_features_in_ = d
        return self

    def log_pdf(self, U):
        check_is_fitted(self, "centers_")
        return kde_copula_logpdf(self.centers_, self.bandwidth_, U)

    def score_samples(self, X):
        check_is_fitted(self, "centers_")
        return self.log_pdf(self.marginals_.cdf(X))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
