"""Evaluation metrics and synthetic copula data."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from ._validation import check_matrix, check_unit_open
from .exceptions import NumericalError, ValidationError
from .gaussian import CorrelationMatrix, sample_mvn
from .marginals import EmpiricalMarginals, latent_to_pseudo

__all__ = [
    "avg_loglik",
    "W2Result",
    "wasserstein2",
    "W2_MAX_POINTS",
    "random_correlation",
    "gen_gaussian_copula",
    "gen_gaussian_mixture_copula",
    "ImageDensity",
    "read_pgm",
    "gen_image_copula",
]

W2_MAX_POINTS = 5000


def avg_loglik(logpdf, U):
    """Mean of ``logpdf(U)`` over rows; rejects non-finite densities."""
    U = check_unit_open(U)
    values = np.asarray(logpdf(U), dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        raise NumericalError(f"non-finite log-density at row {np.flatnonzero(bad)[0]}")
    return float(values.mean())


@dataclass(frozen=True)
class W2Result:
    """Empirical 2-Wasserstein distance, ``sqrt(assignment_cost / n_pairs)``."""

    distance: float
    assignment_cost: float
    n_pairs: int
    assignment: np.ndarray


def wasserstein2(a, b):
    """Exact empirical W2 between two equal-size point sets.

    Solves the optimal perfect matching under squared Euclidean cost with a
    shortest augmenting path assignment solver.
    """
    a = check_matrix(a, name="a")
    b = check_matrix(b, name="b")
    if a.shape != b.shape:
        raise ValidationError(f"point sets must have equal shape, got {a.shape} and {b.shape}")
    if len(a) > W2_MAX_POINTS:
        raise ValidationError(f"at most {W2_MAX_POINTS} points per set, got {len(a)}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    return W2Result(distance=float(np.sqrt(total / len(a))), assignment_cost=total, n_pairs=len(a), assignment=cols)


def random_correlation(d, random_state=None):
    """Correlation matrix from ``A A^T`` with i.i.d. standard normal ``A``."""
    rng = np.random.default_rng(random_state)
    A = rng.standard_normal((d, d))
    return CorrelationMatrix.from_array(A @ A.T)


def gen_gaussian_copula(n, corr, random_state=None):
    """Pseudo-observations from a Gaussian copula."""
    return latent_to_pseudo(sample_mvn(n, corr, random_state))


def gen_gaussian_mixture_copula(n, corr1, corr2, random_state=None):
    """Pseudo-observations from an equal-weight mixture of two Gaussian copulas.

    Both components have uniform marginals, so the mixture is itself a
    copula with density ``0.5 c1 + 0.5 c2``.
    """
    if corr1.dim != corr2.dim:
        raise ValidationError("mixture components must have equal dimension")
    rng = np.random.default_rng(random_state)
    pick = rng.random(n) < 0.5
    eps = rng.standard_normal((n, corr1.dim))
    Z = np.where(pick[:, None], eps @ corr1.chol.T, eps @ corr2.chol.T)
    return latent_to_pseudo(Z)


@dataclass(frozen=True)
class ImageDensity:
    """Grayscale image normalized to a probability mass over pixels.

    ``intensities`` has shape (height, width) and sums to one.
    """

    intensities: np.ndarray

    @classmethod
    def from_array(cls, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValidationError("image must be 2-dimensional")
        if np.any(pixels < 0) or not np.all(np.isfinite(pixels)):
            raise ValidationError("image intensities must be finite and non-negative")
        total = pixels.sum()
        if total <= 0:
            raise ValidationError("image has no positive pixel")
        return cls(pixels / total)

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]


def _pgm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValidationError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path):
    """Read a P2 (ASCII) or P5 (binary) PGM file into an :class:`ImageDensity`."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValidationError(f"{path}: not a P2/P5 PGM file")
    try:
        (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ValidationError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise ValidationError(f"{path}: invalid PGM dimensions or maxval")
    n = width * height
    if magic == b"P2":
        try:
            values, _ = _pgm_tokens(data, n, pos)
            pixels = np.array([int(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise ValidationError(f"{path}: malformed PGM pixel data") from exc
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos : pos + n * dtype.itemsize]
        if len(raw) < n * dtype.itemsize:
            raise ValidationError(f"{path}: truncated PGM pixel data")
        pixels = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if np.any(pixels > maxval):
        raise ValidationError(f"{path}: pixel value above maxval")
    return ImageDensity.from_array(pixels.reshape(height, width))


def gen_image_copula(image, n, random_state=None):
    """Pseudo-observations whose dependence follows the light of an image.

    Pixels are drawn with probability proportional to intensity and jittered
    uniformly inside the pixel. Columns are (column, row) coordinates scaled
    to (0, 1) in array index order, so bright pixels on the main diagonal
    give positive dependence. A final rank transform makes the marginals
    uniform.
    """
    if not isinstance(image, ImageDensity):
        image = ImageDensity.from_array(image)
    rng = np.random.default_rng(random_state)
    flat = image.intensities.ravel()
    idx = rng.choice(flat.size, size=n, p=flat)
    rows, cols = np.divmod(idx, image.width)
    jitter = rng.random((n, 2))
    X = np.column_stack([(cols + jitter[:, 0]) / image.width, (rows + jitter[:, 1]) / image.height])
    return EmpiricalMarginals().fit(X).transform(X)
