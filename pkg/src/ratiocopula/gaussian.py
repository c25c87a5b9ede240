"""Correlation matrices, multivariate normal densities and sampling."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ._validation import check_matrix
from .exceptions import NumericalError, ValidationError

__all__ = [
    "CorrelationMatrix",
    "KlDiagnostic",
    "estimate_correlation",
    "log_mvn_std",
    "log_mvn_corr",
    "sample_mvn",
    "kl_gaussian_copula",
    "KL_WARNING_NATS",
]

_LOG_2PI = np.log(2.0 * np.pi)

# Classifier-based ratio estimation is reported to break down beyond this gap.
KL_WARNING_NATS = 20.0

_JITTER_START = 1e-8
_JITTER_TRIES = 3
_MIN_EIGENVALUE = 1e-10


def _normalize_diagonal(S):
    s = np.sqrt(np.diag(S))
    C = S / np.outer(s, s)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def _factorize(C):
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return None
    eig = np.linalg.eigvalsh(C)
    if eig[0] < _MIN_EIGENVALUE:
        return None
    return L, eig


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Unit-diagonal positive definite matrix with its Cholesky factor and
    ascending eigenvalues.

    Build instances with :meth:`from_array`, which symmetrizes, rescales the
    diagonal and applies diagonal jitter when the matrix is numerically
    singular.
    """

    sigma: np.ndarray
    chol: np.ndarray
    eigenvalues: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self):
        return self.sigma.shape[0]

    @property
    def log_det(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    @classmethod
    def from_array(cls, S, rescale=True):
        """Validate ``S`` and factorize it.

        Parameters
        ----------
        S : array-like of shape (d, d)
            Symmetric matrix. With ``rescale=True`` any positive diagonal is
            accepted and the matrix is converted to a correlation matrix;
            otherwise the diagonal must already be one.
        rescale : bool, default=True
        """
        S = np.array(S, dtype=np.float64, ndmin=2)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValidationError(f"correlation matrix must be square, got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValidationError("correlation matrix has non-finite entries")
        if not np.allclose(S, S.T, atol=1e-10, rtol=0):
            raise ValidationError("correlation matrix is not symmetric")
        diag = np.diag(S)
        if np.any(diag <= 0):
            raise ValidationError("correlation matrix needs a positive diagonal")
        if not rescale and not np.allclose(diag, 1.0, atol=1e-12, rtol=0):
            raise ValidationError("correlation matrix must have unit diagonal")

        C = _normalize_diagonal(S)
        factors = _factorize(C)
        jitter = 0.0
        if factors is None:
            jitter = _JITTER_START
            for _ in range(_JITTER_TRIES):
                Cj = _normalize_diagonal(C + jitter * np.eye(len(C)))
                factors = _factorize(Cj)
                if factors is not None:
                    C = Cj
                    break
                jitter *= 10.0
            else:
                raise NumericalError(
                    "correlation matrix is not positive definite even after "
                    f"jitter up to {jitter / 10.0:g}"
                )
            warnings.warn(
                f"near-singular correlation matrix regularized with jitter {jitter:g}",
                RuntimeWarning,
                stacklevel=2,
            )
        L, eig = factors
        return cls(sigma=C, chol=L, eigenvalues=eig, jitter=jitter)

    @classmethod
    def identity(cls, d):
        return cls.from_array(np.eye(d))

    def inverse(self):
        Linv = solve_triangular(self.chol, np.eye(self.dim), lower=True)
        return Linv.T @ Linv


def estimate_correlation(Z):
    """Sample correlation of latent data, regularized to be positive definite.

    Parameters
    ----------
    Z : array-like of shape (n_samples, n_features)
        At least two rows.

    Returns
    -------
    CorrelationMatrix
    """
    Z = check_matrix(Z, name="Z", min_rows=2)
    if Z.shape[1] == 1:
        return CorrelationMatrix.identity(1)
    S = np.cov(Z, rowvar=False)
    # Zero-variance columns would divide by zero; treat them as independent.
    var = np.diag(S).copy()
    flat = var <= 0
    if flat.any():
        S[flat, :] = 0.0
        S[:, flat] = 0.0
        S[flat, flat] = 1.0
    return CorrelationMatrix.from_array(S)


def _as_rows(z, d=None):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z.reshape(1, -1) if single else z
    if d is not None and Z.shape[1] != d:
        raise ValidationError(f"expected dimension {d}, got {Z.shape[1]}")
    return Z, single


def log_mvn_std(z):
    """Log-density of the standard normal N(0, I) at ``z``.

    ``z`` may be a single point of shape (d,) or rows of shape (n, d).
    """
    Z, single = _as_rows(z)
    d = Z.shape[1]
    out = -0.5 * (d * _LOG_2PI + np.einsum("ij,ij->i", Z, Z))
    return out[0] if single else out


def log_mvn_corr(z, corr):
    """Log-density of N(0, Sigma) via the Cholesky factor of ``corr``."""
    Z, single = _as_rows(z, corr.dim)
    W = solve_triangular(corr.chol, Z.T, lower=True)
    quad = np.einsum("ij,ij->j", W, W)
    out = -0.5 * (corr.dim * _LOG_2PI + corr.log_det + quad)
    return out[0] if single else out


def sample_mvn(n, corr, random_state=None):
    """Draw ``n`` rows from N(0, Sigma) as ``eps @ L.T``."""
    rng = np.random.default_rng(random_state)
    eps = rng.standard_normal((int(n), corr.dim))
    return eps @ corr.chol.T


@dataclass(frozen=True)
class KlDiagnostic:
    """KL divergence between N(0, Sigma) and N(0, I) and its eigenvalue bound.

    Attributes
    ----------
    exact_kl : float
        ``-0.5 * sum(log e_i)`` in nats.
    bound : float
        ``-(d / 2) * log(e_min)``; never smaller than ``exact_kl``.
    e_min : float
        Smallest eigenvalue of Sigma.
    """

    exact_kl: float
    bound: float
    e_min: float

    @property
    def exceeds_threshold(self):
        return self.bound > KL_WARNING_NATS


def kl_gaussian_copula(corr):
    eig = corr.eigenvalues
    exact = -0.5 * float(np.sum(np.log(eig)))
    bound = -0.5 * corr.dim * float(np.log(eig[0]))
    # Rounding can leave tiny negatives at Sigma = I.
    return KlDiagnostic(exact_kl=max(exact, 0.0), bound=max(bound, exact, 0.0), e_min=float(eig[0]))
