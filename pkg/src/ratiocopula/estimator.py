"""Ratio copula estimator: empirical marginals, latent Gaussian scale and a
classifier-based log-ratio, optionally guided by a correlated Gaussian."""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_unit_open
from .classifier import TrainConfig, build_model, train
from .exceptions import FitWarning, ValidationError
from .gaussian import (
    KL_WARNING_NATS,
    CorrelationMatrix,
    estimate_correlation,
    kl_gaussian_copula,
    log_mvn_corr,
    log_mvn_std,
)
from .marginals import EmpiricalMarginals

__all__ = ["RatioCopula", "FitReport", "fit_ratio_copula", "normalization_check"]

_OVERFIT_LOSS = 0.01
_Z_SOFT_RANGE = (0.8, 1.25)
_AUTO_GUIDE_DIM = 4
_AUTO_GUIDE_KL = 2.0


@dataclass
class FitReport:
    """Diagnostics collected while fitting a :class:`RatioCopula`.

    ``kl_exact`` and ``kl_bound`` describe the Gaussian copula of the data's
    latent correlation: how far apart dependent data and independent noise
    are, and the eigenvalue bound on that gap.
    """

    loss_trace: np.ndarray
    z_estimate: float
    kl_exact: float
    kl_bound: float
    e_min: float
    guided: bool
    wall_time: float
    warnings: list = field(default_factory=list)

    @property
    def final_loss(self):
        return float(self.loss_trace[-1])

    def rows(self):
        """``(key, value)`` pairs for tabular output."""
        return [
            ("z_estimate", self.z_estimate),
            ("final_loss", self.final_loss),
            ("kl_exact", self.kl_exact),
            ("kl_bound", self.kl_bound),
            ("e_min", self.e_min),
            ("guided", int(self.guided)),
            ("epochs", len(self.loss_trace)),
            ("wall_time", self.wall_time),
            ("n_warnings", len(self.warnings)),
        ]


class RatioCopula(DensityMixin, BaseEstimator):
    """Copula density estimated by classifying data against Gaussian noise.

    Data are mapped to pseudo-observations with empirical CDFs and then to
    the latent scale with the normal quantile. A classifier is trained to
    separate these latent points from independent N(0, I) noise; its log-odds
    is the log copula density. In guided mode the noise is N(0, Sigma) with
    Sigma the latent sample correlation, and the known Gaussian ratio
    ``N(z; 0, Sigma) / N(z; 0, I)`` is added back at evaluation.

    Parameters
    ----------
    model : {"mlp", "poly"}, default="mlp"
        Log-ratio model family.
    degree : int, default=5
        Polynomial degree for ``model="poly"``.
    include_interactions : bool, default=True
        Use all mixed monomials for ``model="poly"``.
    hidden_widths : tuple of int, optional
        Hidden layer widths for ``model="mlp"``. Defaults to (100, 100, 100)
        for d <= 2 and (128, 64) otherwise.
    leak : float, optional
        Negative-side slope of the rectifier. Defaults to 0 for d <= 2 and
        0.01 otherwise.
    residual : bool, default=True
        Add identity skips to hidden blocks of equal width.
    nu : float, default=10
        Noise points per data point.
    epochs : int, default=500
    learning_rate : float, default=1e-3
        Adam step size.
    batch_size : int, optional
        See :class:`~ratiocopula.classifier.TrainConfig`.
    resample_noise : bool, default=True
        Draw fresh noise every epoch.
    guided : bool or "auto", default="auto"
        ``"auto"`` guides when d > 4 or the data's Gaussian KL exceeds 2 nats.
    random_state : int, optional

    Attributes
    ----------
    marginals_ : EmpiricalMarginals
    model_ : MLPRatio or PolyRatio
    guide_ : CorrelationMatrix or None
    report_ : FitReport
    n_features_in_ : int
    """

    def __init__(
        self,
        model="mlp",
        degree=5,
        include_interactions=True,
        hidden_widths=None,
        leak=None,
        residual=True,
        nu=10.0,
        epochs=500,
        learning_rate=1e-3,
        batch_size=None,
        resample_noise=True,
        guided="auto",
        random_state=None,
    ):
        self.model = model
        self.degree = degree
        self.include_interactions = include_interactions
        self.hidden_widths = hidden_widths
        self.leak = leak
        self.residual = residual
        self.nu = nu
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.resample_noise = resample_noise
        self.guided = guided
        self.random_state = random_state

    def _train_config(self, seed):
        return TrainConfig(
            nu=float(self.nu),
            epochs=int(self.epochs),
            learning_rate=float(self.learning_rate),
            batch_size=self.batch_size,
            resample_noise=bool(self.resample_noise),
            seed=seed,
        ).validate()

    def fit(self, X, y=None):
        """Fit marginals, latent correlation and the log-ratio classifier.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Data on its original scale. Pass pseudo-observations directly if
            the marginals are already uniform; the rank transform leaves them
            unchanged up to ties.
        y : None
            Ignored.

        Returns
        -------
        self : RatioCopula
        """
        start = time.perf_counter()
        X = check_matrix(X, min_rows=2)
        n, d = X.shape
        init_seed, train_seed = np.random.SeedSequence(self.random_state).spawn(2)
        config = self._train_config(train_seed)
        messages = []

        def warn(msg):
            messages.append(msg)
            warnings.warn(msg, FitWarning, stacklevel=3)

        if n < 2 * d:
            warn(f"only {n} rows for {d} dimensions; at least {2 * d} recommended")

        self.marginals_ = EmpiricalMarginals().fit(X)
        Z = ndtri(self.marginals_.cdf(X))
        data_corr = estimate_correlation(Z)
        kl = kl_gaussian_copula(data_corr)

        guided = self.guided
        if guided == "auto":
            guided = d > _AUTO_GUIDE_DIM or kl.exact_kl > _AUTO_GUIDE_KL
        elif not isinstance(guided, (bool, np.bool_)):
            raise ValidationError(f"guided must be True, False or 'auto', got {guided!r}")
        guided = bool(guided)
        if not guided and kl.bound > KL_WARNING_NATS:
            warn(
                f"latent Gaussian KL bound {kl.bound:.1f} nats exceeds the "
                f"{KL_WARNING_NATS:g}-nat gap where plain classifier ratio "
                "estimation tends to fail; consider guided=True"
            )

        self.guide_ = data_corr if guided else None
        self.model_ = build_model(
            self.model,
            d,
            random_state=init_seed,
            hidden_widths=self.hidden_widths,
            leak=self.leak,
            residual=self.residual,
            degree=self.degree,
            include_interactions=self.include_interactions,
        )
        loss_trace = train(self.model_, Z, config, guide=self.guide_)
        self.n_features_in_ = d
        self._cache_guide()

        z_est = float(np.exp(self.model_.log_z))
        if loss_trace[-1] < _OVERFIT_LOSS:
            warn(
                f"final loss {loss_trace[-1]:.3g} is close to zero; the classifier "
                "is overfitting and the densities may be too far apart"
            )
        if not _Z_SOFT_RANGE[0] <= z_est <= _Z_SOFT_RANGE[1]:
            warn(f"normalizer estimate {z_est:.3f} is far from 1; the fit may be poor")

        self.report_ = FitReport(
            loss_trace=loss_trace,
            z_estimate=z_est,
            kl_exact=kl.exact_kl,
            kl_bound=kl.bound,
            e_min=kl.e_min,
            guided=guided,
            wall_time=time.perf_counter() - start,
            warnings=messages,
        )
        return self

    @classmethod
    def from_parts(cls, model, guide=None, marginals=None):
        """Assemble a fitted copula from a trained model, an optional guide
        and optional marginals (needed only for data-scale methods)."""
        est = cls(model="poly" if hasattr(model, "exponents") else "mlp", guided=guide is not None)
        est.model_ = model
        est.guide_ = guide
        if guide is not None and guide.dim != model.input_dim:
            raise ValidationError("guide dimension does not match the model")
        est.marginals_ = marginals
        est.n_features_in_ = model.input_dim
        est._cache_guide()
        return est

    def _cache_guide(self):
        self._guide_inv = None if self.guide_ is None else self.guide_.inverse()

    # evaluation -----------------------------------------------------------

    def log_pdf_latent(self, Z, check=True):
        """Log copula density at latent points ``Z = Phi^{-1}(U)``."""
        check_is_fitted(self, "model_")
        if check:
            Z = check_matrix(Z, name="Z", n_features=self.n_features_in_)
        out = self.model_.log_ratio(Z, check=check)
        if self.guide_ is not None:
            out = out + log_mvn_corr(Z, self.guide_) - log_mvn_std(Z)
        return out

    def log_pdf(self, U):
        """Log copula density at pseudo-observations ``U`` in (0, 1)^d."""
        check_is_fitted(self, "model_")
        U = check_unit_open(U, n_features=self.n_features_in_)
        return self.log_pdf_latent(ndtri(U))

    def log_target_latent(self, Z, check=True):
        """Log of ``c(Phi(z)) * N(z; 0, I)`` and its gradient in ``z``.

        This is the latent-scale joint density targeted by the sampler.

        Returns
        -------
        logp : ndarray of shape (n,)
        grad : ndarray of shape (n, d)
        """
        check_is_fitted(self, "model_")
        Z = check_matrix(Z, name="Z", n_features=self.n_features_in_) if check else np.atleast_2d(Z)
        logp, grad = self.model_.log_ratio_and_gradient(Z, check=check)
        if self.guide_ is None:
            logp = logp + log_mvn_std(Z)
            grad = grad - Z
        else:
            logp = logp + log_mvn_corr(Z, self.guide_)
            grad = grad - Z @ self._guide_inv
        return logp, grad

    def score_samples(self, X):
        """Log copula density of data rows, using the fitted marginals."""
        check_is_fitted(self, "marginals_")
        if self.marginals_ is None:
            raise ValidationError("this copula has no marginals; use log_pdf on pseudo-observations")
        return self.log_pdf(self.marginals_.cdf(X))

    def score(self, X, y=None):
        """Average copula log-likelihood of data rows."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, scale="data", hmc=None, random_state=None):
        """Draw samples with Hamiltonian Monte Carlo.

        Parameters
        ----------
        n_samples : int
        scale : {"data", "pseudo", "latent"}
        hmc : HmcConfig, optional
        random_state : int, optional
            Overrides ``hmc.seed``.
        """
        from .sampling import HmcConfig, sample_copula, sample_data, sample_latent

        cfg = hmc if hmc is not None else HmcConfig()
        if random_state is not None:
            cfg = cfg.replace(seed=random_state)
        if scale == "data":
            return sample_data(self, n_samples, cfg)
        if scale == "pseudo":
            return sample_copula(self, n_samples, cfg)
        if scale == "latent":
            return sample_latent(self, n_samples, cfg)[0]
        raise ValidationError(f"unknown scale {scale!r}")

    def normalization_check(self, points_per_dim=201, tail=0.001):
        return normalization_check(self.log_pdf, self.n_features_in_, points_per_dim, tail)


def fit_ratio_copula(X, guided="auto", **params):
    """Fit a :class:`RatioCopula` and return it with its :class:`FitReport`."""
    est = RatioCopula(guided=guided, **params).fit(X)
    return est, est.report_


def normalization_check(logpdf, dim, points_per_dim=201, tail=0.001):
    """Midpoint-rule integral of ``exp(logpdf)`` over (0, 1)^dim.

    Cell midpoints are clamped to ``[tail, 1 - tail]`` before evaluation so
    the unbounded corners of copula densities are not sampled too close to
    the boundary. Only dim <= 3 is supported.
    """
    if dim > 3:
        raise ValidationError(f"grid quadrature supports at most 3 dimensions, got {dim}")
    m = int(points_per_dim)
    if m < 1:
        raise ValidationError("points_per_dim must be positive")
    grid = np.clip((np.arange(m) + 0.5) / m, tail, 1 - tail)
    axes = np.meshgrid(*([grid] * dim), indexing="ij")
    U = np.stack([a.ravel() for a in axes], axis=1)
    total = 0.0
    for s in range(0, len(U), 1 << 16):
        total += np.exp(logpdf(U[s : s + (1 << 16)])).sum()
    return float(total / m**dim)
