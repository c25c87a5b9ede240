"""Shared oracles and constructors for the test suite."""

import numpy as np
from scipy.stats import multivariate_normal, norm

from ratiocopula.classifier import MLPRatio, MlpSpec, PolyLogisticSpec, PolyRatio
from ratiocopula.estimator import RatioCopula
from ratiocopula.gaussian import CorrelationMatrix

DATA_DIR = __import__("pathlib").Path(__file__).parent / "data"


def corr2(rho):
    return CorrelationMatrix.from_array([[1.0, rho], [rho, 1.0]])


def scipy_gaussian_copula_logpdf(sigma, U):
    """Gaussian copula log-density computed with scipy.stats as an oracle."""
    Z = norm.ppf(U)
    return multivariate_normal(mean=np.zeros(len(sigma)), cov=sigma).logpdf(Z) - norm.logpdf(Z).sum(axis=1)


def zero_copula(d, guide=None, kind="poly"):
    """Untrained copula whose classifier output is identically zero."""
    if kind == "mlp":
        model = MLPRatio.initialize(MlpSpec.default(d), random_state=0)
    else:
        model = PolyRatio(PolyLogisticSpec(d, degree=1))
    return RatioCopula.from_parts(model, guide=guide)


def rel_err(a, b, floor=1e-6):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps coordinates whose true derivative is (near) zero from
    dividing rounding noise by zero.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x, h_scale=1e-4):
    """Central differences with step ``h_scale * max(1, |x_i|)`` per coordinate."""
    x = np.array(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        h = h_scale * max(1.0, abs(x.flat[i]))
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def min_abs_preactivation(model, Z):
    """Smallest |pre-activation| over hidden units for each row of ``Z``."""
    _, cache = model._forward(np.atleast_2d(Z))
    return np.min(np.column_stack([np.abs(pre).min(axis=1) for _, pre in cache[:-1]]), axis=1)


def kink_free_rows(model, rng, n, d, margin=1e-2, scale=1.0):
    """Draw ``n`` latent rows whose hidden pre-activations all stay at least
    ``margin`` away from the rectifier kink."""
    rows = []
    while len(rows) < n:
        Z = rng.standard_normal((4 * n, d)) * scale
        keep = Z[min_abs_preactivation(model, Z) > margin]
        rows.extend(keep[: n - len(rows)])
    return np.array(rows)


def random_mlp(d, rng, widths=(8, 8), leak=0.0, residual=True, scale=0.5):
    """MLP with every parameter, including output weights, drawn at random."""
    spec = MlpSpec(d, widths, leak=leak, residual=residual)
    model = MLPRatio(spec)
    model.theta[:] = rng.normal(scale=scale, size=model.n_params)
    return model
