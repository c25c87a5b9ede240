"""Log-ratio models trained by logistic (noise-contrastive) classification.

Two model families are provided, a residual rectifier MLP and a polynomial
logistic model. Both expose a flat parameter vector ``theta`` whose last entry
is the learned log-normalizer ``log_z``, reverse-mode gradients with respect
to ``theta`` and gradients with respect to the input.

The modeled log copula density on the latent scale is::

    log c(z) = g(z; theta) - log_norm + log_z

where ``g`` is the network output and ``log_norm`` is the log-mean of
``exp(g)`` over the noise sample. Subtracting ``log_norm`` makes
``exp(g - log_norm)`` integrate to one under the noise law, so ``log_z``
alone carries any remaining mass and ``exp(log_z)`` close to 1 signals a
well-normalized fit.
"""

import dataclasses
import itertools
import math

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from ._validation import check_matrix
from .exceptions import NumericalError, ValidationError
from .gaussian import sample_mvn

__all__ = [
    "MlpSpec",
    "PolyLogisticSpec",
    "MLPRatio",
    "PolyRatio",
    "TrainConfig",
    "Adam",
    "build_model",
    "forward_log_ratio",
    "input_gradient",
    "nce_loss",
    "loss_gradients",
    "train",
]

# Rows per forward/backward chunk; bounds memory for large noise samples.
_CHUNK = 16384
# Above this many rows x hidden units, training recomputes the forward pass
# for the backward pass instead of keeping every chunk's activations.
_CACHE_LIMIT = 8_000_000
_FULL_BATCH_LIMIT = 20000
_DEFAULT_MINIBATCH = 1024
_MIN_NORMALIZER_SAMPLES = 100_000


@dataclasses.dataclass(frozen=True)
class MlpSpec:
    """Architecture of a rectifier MLP log-ratio model.

    A hidden block computes ``act(W h + b)`` and, when ``residual`` is set and
    the block's input and output widths agree, adds its input back. The
    output layer is a bias-free linear map to a scalar; the constant term is
    carried by ``log_z``.
    """

    input_dim: int
    hidden_widths: tuple = (100, 100, 100)
    leak: float = 0.0
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValidationError("input_dim must be at least 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValidationError("MLP needs at least one hidden layer of width >= 1")
        if self.leak < 0:
            raise ValidationError("leak must be non-negative")

    @classmethod
    def default(cls, input_dim):
        if input_dim <= 2:
            return cls(input_dim, (100, 100, 100), leak=0.0, residual=True)
        return cls(input_dim, (128, 64), leak=0.01, residual=True)


@dataclasses.dataclass(frozen=True)
class PolyLogisticSpec:
    """Polynomial log-ratio model over monomials of total degree 1..degree.

    With ``include_interactions`` every monomial is used, giving
    ``C(d + degree, degree) - 1`` features; otherwise only pure powers
    ``z_i ** k``. The constant monomial is left out because ``log_z`` plays
    its role.
    """

    input_dim: int
    degree: int = 5
    include_interactions: bool = True

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValidationError("input_dim must be at least 1")
        if self.degree < 1:
            raise ValidationError("degree must be at least 1")

    def exponents(self):
        d = self.input_dim
        rows = []
        for k in range(1, self.degree + 1):
            if self.include_interactions:
                for combo in itertools.combinations_with_replacement(range(d), k):
                    e = np.zeros(d, dtype=np.int64)
                    for i in combo:
                        e[i] += 1
                    rows.append(e)
            else:
                for i in range(d):
                    e = np.zeros(d, dtype=np.int64)
                    e[i] = k
                    rows.append(e)
        return np.array(rows, dtype=np.int64)


class _RatioModel:
    """Shared parameter handling; subclasses implement ``_forward``/``_backward``."""

    def __init__(self, spec, theta=None, log_norm=0.0):
        self.spec = spec
        self._layout()
        n = self.n_weights + 1
        if theta is None:
            theta = np.zeros(n)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ValidationError(f"theta must have {n} entries, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("theta has non-finite entries")
        self.theta = theta
        self.log_norm = float(log_norm)

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def n_params(self):
        return self.n_weights + 1

    @property
    def log_z(self):
        return float(self.theta[-1])

    @property
    def cache_width(self):
        """Floats kept per row by a forward pass for the backward pass."""
        return self.n_weights

    def copy(self):
        return type(self)(self.spec, self.theta.copy(), self.log_norm)

    def _check_input(self, Z):
        return check_matrix(Z, name="z", n_features=self.input_dim)

    def raw_output(self, Z, check=True):
        """Network output ``g(z)`` without normalizer terms, computed in chunks."""
        Z = self._check_input(Z) if check else np.atleast_2d(Z)
        out = np.empty(len(Z))
        for s in range(0, len(Z), _CHUNK):
            out[s : s + _CHUNK] = self._forward(Z[s : s + _CHUNK], check=check)[0]
        return out

    def log_ratio(self, Z, check=True):
        """Modeled log-ratio ``g(z) - log_norm + log_z`` for each row."""
        return self.raw_output(Z, check=check) - self.log_norm + self.log_z

    def weight_gradient(self, Z, upstream):
        """Gradient of ``sum_k upstream[k] * g(z_k)`` with respect to the weights."""
        grad = np.zeros(self.n_weights)
        for s in range(0, len(Z), _CHUNK):
            _, cache = self._forward(Z[s : s + _CHUNK], check=True)
            grad += self._backward(cache, upstream[s : s + _CHUNK])[0]
        return grad

    def _value_and_input_grad(self, Z, check):
        return self._forward(Z, check=check)[0], self._input_grad(Z, check)

    def log_ratio_and_gradient(self, Z, check=True):
        """Log-ratio and its input gradient from a single forward pass."""
        Z = self._check_input(Z) if check else np.atleast_2d(Z)
        out = np.empty(len(Z))
        G = np.empty_like(Z)
        for s in range(0, len(Z), _CHUNK):
            out[s : s + _CHUNK], G[s : s + _CHUNK] = self._value_and_input_grad(Z[s : s + _CHUNK], check)
        return out - self.log_norm + self.log_z, G

    def input_gradient(self, Z, check=True):
        """Row-wise gradient of the log-ratio with respect to ``z``."""
        Z = self._check_input(Z) if check else np.atleast_2d(Z)
        G = np.empty_like(Z)
        for s in range(0, len(Z), _CHUNK):
            G[s : s + _CHUNK] = self._input_grad(Z[s : s + _CHUNK], check)
        return G


class MLPRatio(_RatioModel):
    """Residual rectifier MLP.

    ``theta`` layout: for each hidden layer its weight matrix of shape
    (fan_in, fan_out) in row-major order followed by its bias, then the output
    weight vector, then ``log_z``.
    """

    def _layout(self):
        widths = (self.spec.input_dim,) + self.spec.hidden_widths
        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = (offset, offset + fan_in * fan_out, (fan_in, fan_out))
            offset = w[1]
            b = (offset, offset + fan_out)
            offset = b[1]
            self._shapes.append((w, b))
        self._out = (offset, offset + widths[-1])
        self.n_weights = self._out[1]
        self._skip = [self.spec.residual and a == b for a, b in zip(widths[:-1], widths[1:])]
        self._cache_width = 2 * sum(widths[:-1]) + widths[-1]

    @property
    def cache_width(self):
        return self._cache_width

    @classmethod
    def initialize(cls, spec, random_state=None):
        """Glorot-uniform hidden weights, zero biases and zero output weights,
        so a fresh model is the independence copula."""
        rng = np.random.default_rng(random_state)
        model = cls(spec)
        for (w0, w1, shape), _ in model._shapes:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            model.theta[w0:w1] = rng.uniform(-limit, limit, size=w1 - w0)
        return model

    def _layers(self):
        for (w0, w1, shape), (b0, b1) in self._shapes:
            yield self.theta[w0:w1].reshape(shape), self.theta[b0:b1]

    def _forward(self, Z, check=True):
        leak = self.spec.leak
        a = Z
        cache = []
        for (W, b), skip in zip(self._layers(), self._skip):
            pre = a @ W
            pre += b
            h = np.maximum(pre, 0.0) if leak == 0 else np.where(pre > 0, pre, leak * pre)
            if skip:
                h += a
            cache.append((a, pre))
            a = h
        w_out = self.theta[self._out[0] : self._out[1]]
        out = a @ w_out
        cache.append(a)
        if check and not np.all(np.isfinite(out)):
            # Non-finite values propagate to the output; name the first layer
            # where they appear.
            for i, (_, pre) in enumerate(cache[:-1]):
                if not np.all(np.isfinite(pre)):
                    raise NumericalError(f"non-finite activation in hidden layer {i}")
            raise NumericalError(f"non-finite activation in output layer {len(cache) - 1}")
        return out, cache

    def _backward(self, cache, upstream, weights=True):
        leak = self.spec.leak
        grad = np.zeros(self.n_weights) if weights else None
        a_last = cache[-1]
        o0, o1 = self._out
        if weights:
            grad[o0:o1] = a_last.T @ upstream
        da = np.outer(upstream, self.theta[o0:o1])
        layers = list(self._layers())
        for i in range(len(layers) - 1, -1, -1):
            a_prev, pre = cache[i]
            W, _ = layers[i]
            dpre = da * (pre > 0) if leak == 0 else da * np.where(pre > 0, 1.0, leak)
            if weights:
                (w0, w1, _), (b0, b1) = self._shapes[i]
                grad[w0:w1] = (a_prev.T @ dpre).ravel()
                grad[b0:b1] = dpre.sum(axis=0)
            da_prev = dpre @ W.T
            if self._skip[i]:
                da_prev = da_prev + da
            da = da_prev
        return grad, da

    def _input_grad(self, Z, check):
        return self._value_and_input_grad(Z, check)[1]

    def _value_and_input_grad(self, Z, check):
        out, cache = self._forward(Z, check=check)
        return out, self._backward(cache, np.ones(len(Z)), weights=False)[1]


class PolyRatio(_RatioModel):
    """Polynomial logistic model ``g(z) = sum_f w_f prod_i z_i ** e_fi``.

    ``theta`` holds one weight per monomial in the order of
    :meth:`PolyLogisticSpec.exponents` (by total degree, then
    ``itertools.combinations_with_replacement`` order), then ``log_z``.
    """

    def _layout(self):
        self.exponents = self.spec.exponents()
        self.n_weights = len(self.exponents)

    @classmethod
    def initialize(cls, spec, random_state=None):
        return cls(spec)

    def _powers(self, Z):
        # P[k, i, e] = Z[k, i] ** e for e = 0..degree
        P = np.empty(Z.shape + (self.spec.degree + 1,))
        P[..., 0] = 1.0
        for e in range(1, self.spec.degree + 1):
            P[..., e] = P[..., e - 1] * Z
        return P

    def _features(self, P):
        E = self.exponents
        phi = np.ones((P.shape[0], len(E)))
        for i in range(P.shape[1]):
            phi *= P[:, i, E[:, i]]
        return phi

    def _forward(self, Z, check=True):
        P = self._powers(Z)
        phi = self._features(P)
        out = phi @ self.theta[:-1]
        if check and not np.all(np.isfinite(out)):
            raise NumericalError("non-finite polynomial features in layer 0")
        return out, phi

    def _backward(self, phi, upstream):
        return phi.T @ upstream, None

    def _input_grad(self, Z, check):
        P = self._powers(Z)
        E = self.exponents
        w = self.theta[:-1]
        G = np.empty_like(Z)
        for i in range(Z.shape[1]):
            dphi = E[:, i] * P[:, i, np.maximum(E[:, i] - 1, 0)]
            for j in range(Z.shape[1]):
                if j != i:
                    dphi = dphi * P[:, j, E[:, j]]
            G[:, i] = dphi @ w
        return G


def build_model(kind, input_dim, random_state=None, **options):
    """Create a freshly initialized model of ``kind`` ``"mlp"`` or ``"poly"``."""
    if kind == "mlp":
        spec = MlpSpec.default(input_dim)
        overrides = {k: v for k, v in options.items() if v is not None and k in ("hidden_widths", "leak", "residual")}
        if overrides:
            spec = dataclasses.replace(spec, **overrides)
        return MLPRatio.initialize(spec, random_state)
    if kind == "poly":
        kw = {k: v for k, v in options.items() if v is not None and k in ("degree", "include_interactions")}
        return PolyRatio.initialize(PolyLogisticSpec(input_dim, **kw), random_state)
    raise ValidationError(f"unknown model kind {kind!r}; use 'mlp' or 'poly'")


def forward_log_ratio(model, z):
    """Log-ratio of a single point or of each row of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    out = model.log_ratio(z.reshape(1, -1) if z.ndim == 1 else z)
    return float(out[0]) if z.ndim == 1 else out


def input_gradient(model, z):
    z = np.asarray(z, dtype=np.float64)
    G = model.input_gradient(z.reshape(1, -1) if z.ndim == 1 else z)
    return G[0] if z.ndim == 1 else G


def _loss_terms(model, Zd, Zn, nu, self_normalize, need_grad):
    n_p = len(Zd)
    if n_p == 0 or len(Zn) == 0:
        raise ValidationError("nce loss needs non-empty data and noise samples")
    Z = np.vstack([Zd, Zn])
    caches = None
    if need_grad and len(Z) * model.cache_width <= _CACHE_LIMIT:
        g = np.empty(len(Z))
        caches = []
        for s in range(0, len(Z), _CHUNK):
            g[s : s + _CHUNK], cache = model._forward(Z[s : s + _CHUNK], check=True)
            caches.append(cache)
    else:
        g = model.raw_output(Z)
    gd, gn = g[:n_p], g[n_p:]
    log_norm = logsumexp(gn) - math.log(len(gn)) if self_normalize else 0.0
    shift = model.log_z - log_norm - math.log(nu)
    sd, sn = gd + shift, gn + shift
    loss = -(log_expit(sd).sum() + log_expit(-sn).sum()) / n_p
    if not need_grad:
        return loss, None, log_norm
    ud = -expit(-sd) / n_p
    un = expit(sn) / n_p
    d_log_z = ud.sum() + un.sum()
    if self_normalize:
        un = un - d_log_z * softmax(gn)
    upstream = np.concatenate([ud, un])
    if caches is not None:
        grad_w = np.zeros(model.n_weights)
        for k, cache in enumerate(caches):
            grad_w += model._backward(cache, upstream[k * _CHUNK : (k + 1) * _CHUNK])[0]
    else:
        grad_w = model.weight_gradient(Z, upstream)
    return loss, np.append(grad_w, d_log_z), log_norm


def nce_loss(model, z_data, z_noise, nu, self_normalize=True):
    """Logistic loss averaged per data point.

    ``-(1/T_p) [sum_data log sigma(s) + sum_noise log sigma(-s)]`` with
    ``s = g(z) - log_norm + log_z - log(nu)``. With ``self_normalize=False``
    the ``log_norm`` term is zero; otherwise it is the log-mean of ``exp(g)``
    over ``z_noise``.
    """
    Zd = check_matrix(z_data, name="z_data", n_features=model.input_dim)
    Zn = check_matrix(z_noise, name="z_noise", n_features=model.input_dim)
    return float(_loss_terms(model, Zd, Zn, nu, self_normalize, need_grad=False)[0])


def loss_gradients(model, z_data, z_noise, nu, self_normalize=True):
    """Return ``(loss, gradient)`` of :func:`nce_loss` with respect to ``theta``."""
    Zd = check_matrix(z_data, name="z_data", n_features=model.input_dim)
    Zn = check_matrix(z_noise, name="z_noise", n_features=model.input_dim)
    loss, grad, _ = _loss_terms(model, Zd, Zn, nu, self_normalize, need_grad=True)
    return float(loss), grad


class Adam:
    """Adam with bias correction, updating a parameter vector in place."""

    def __init__(self, n, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, state):
        self.m, self.v, self.t = state[0].copy(), state[1].copy(), state[2]


@dataclasses.dataclass
class TrainConfig:
    """Hyperparameters for :func:`train`.

    ``batch_size=None`` trains full-batch up to 20000 data points and uses
    minibatches of 1024 beyond that. Noise batches always hold
    ``round(nu * batch)`` points.
    """

    nu: float = 10.0
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None
    resample_noise: bool = True
    self_normalize: bool = True
    seed: int | None = None

    def validate(self):
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ValidationError(f"nu must be positive, got {self.nu}")
        if int(self.epochs) < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValidationError("batch_size must be positive")
        return self


def _noise_sampler(d, guide):
    if guide is None:
        return lambda n, rng: rng.standard_normal((n, d))
    return lambda n, rng: sample_mvn(n, guide, rng)


def train(model, z_data, config, guide=None):
    """Fit ``model`` in place by Adam on the NCE loss.

    Parameters
    ----------
    model : MLPRatio or PolyRatio
    z_data : array-like of shape (n_samples, d)
        Latent-scale data.
    config : TrainConfig
    guide : CorrelationMatrix, optional
        If given, noise is drawn from N(0, Sigma) instead of N(0, I).

    Returns
    -------
    loss_trace : ndarray of shape (epochs,)
        Per-epoch loss (mean over minibatches) before that epoch's updates.

    Raises
    ------
    NumericalError
        If an epoch yields a non-finite loss twice; the first time the step
        size is halved and the epoch retried.
    """
    config.validate()
    Zd = check_matrix(z_data, name="z_data", min_rows=1, n_features=model.input_dim)
    rng = np.random.default_rng(config.seed)
    draw = _noise_sampler(model.input_dim, guide)
    n = len(Zd)
    nu = float(config.nu)

    batch = config.batch_size
    if batch is None:
        batch = n if n <= _FULL_BATCH_LIMIT else _DEFAULT_MINIBATCH
    batch = min(int(batch), n)
    n_noise_batch = max(1, round(nu * batch))

    opt = Adam(model.n_params, config.learning_rate, config.beta1, config.beta2, config.eps)
    pool = None
    if not config.resample_noise:
        pool = draw(max(1, round(nu * n)), rng)

    trace = np.empty(int(config.epochs))
    halved = False
    previous = None
    epoch = 0
    while epoch < len(trace):
        current = (model.theta.copy(), opt.state(), rng.bit_generator.state)
        try:
            trace[epoch] = _run_epoch(
                model, Zd, opt, rng, draw, pool, nu, batch, n_noise_batch, config.self_normalize
            )
        except NumericalError as exc:
            if halved:
                raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from exc
            # The offending parameters came from the previous epoch's update,
            # so roll back one epoch before retrying with half the step.
            halved = True
            theta, adam_state, rng_state = previous if previous is not None else current
            model.theta[:] = theta
            opt.restore(adam_state)
            rng.bit_generator.state = rng_state
            opt.learning_rate *= 0.5
            if previous is not None:
                epoch -= 1
            previous = None
            continue
        previous = current
        epoch += 1

    if config.self_normalize:
        n_norm = max(round(nu * n), _MIN_NORMALIZER_SAMPLES)
        gn = model.raw_output(draw(n_norm, rng))
        model.log_norm = float(logsumexp(gn) - math.log(n_norm))
    return trace


def _batches(Zd, rng, draw, pool, batch, n_noise_batch):
    n = len(Zd)
    if batch == n:
        yield Zd, (draw(n_noise_batch, rng) if pool is None else pool)
        return
    order = rng.permutation(n)
    noise_order = None if pool is None else rng.permutation(len(pool))
    for b, start in enumerate(range(0, n - batch + 1, batch)):
        Zb = Zd[order[start : start + batch]]
        if pool is None:
            yield Zb, draw(n_noise_batch, rng)
        else:
            idx = noise_order[(b * n_noise_batch + np.arange(n_noise_batch)) % len(pool)]
            yield Zb, pool[idx]


def _run_epoch(model, Zd, opt, rng, draw, pool, nu, batch, n_noise_batch, self_normalize):
    losses = []
    for Zb, Nb in _batches(Zd, rng, draw, pool, batch, n_noise_batch):
        loss, grad, _ = _loss_terms(model, Zb, Nb, nu, self_normalize, need_grad=True)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError("non-finite loss or gradient")
        opt.step(model.theta, grad)
        losses.append(loss)
    return float(np.mean(losses))
