"""Hamiltonian Monte Carlo on the latent scale of a fitted copula.

The target is ``log c(Phi(z)) + log N(z; 0, I)``, the latent joint density;
samples are mapped to (0, 1)^d with the normal CDF and optionally to the data
scale with the empirical quantile functions.

Chain ``k`` draws all of its randomness (start point, momenta, acceptance
uniforms) from ``numpy.random.default_rng(SeedSequence(seed).spawn(n)[k])``,
so chains are independent of each other and of how many run together.
"""

import dataclasses
import warnings

import numpy as np

from .exceptions import NumericalError, ValidationError
from .marginals import latent_to_pseudo

__all__ = [
    "HmcConfig",
    "ChainStats",
    "leapfrog",
    "hmc_step",
    "sample_latent",
    "sample_copula",
    "sample_data",
]

# Energy error beyond which a trajectory counts as divergent.
_MAX_ENERGY_ERROR = 1000.0


@dataclasses.dataclass(frozen=True)
class HmcConfig:
    """Sampler settings.

    Parameters
    ----------
    step_size : float, default=0.1
        Initial leapfrog step.
    leapfrog_steps : int, default=20
    burnin : int, default=100
        Transitions before the recorded one.
    adapt : bool, default=True
        During burn-in, every ``adapt_window`` transitions halve a chain's
        step when its window acceptance is below 0.5 and double it above
        0.95. A chain never doubles back to a step at which it has already
        diverged, nor grows in the last window. The step is frozen after
        burn-in.
    adapt_window : int, default=10
    mode : {"independent", "thinned"}, default="independent"
        ``"independent"`` runs one chain per sample and keeps the state after
        ``burnin + 1`` transitions. ``"thinned"`` runs a single chain and keeps
        every ``thin``-th state after burn-in.
    thin : int, default=10
    seed : int, optional
    """

    step_size: float = 0.1
    leapfrog_steps: int = 20
    burnin: int = 100
    adapt: bool = True
    adapt_window: int = 10
    mode: str = "independent"
    thin: int = 10
    seed: int | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValidationError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ValidationError("leapfrog_steps must be at least 1")
        if self.burnin < 0:
            raise ValidationError("burnin must be non-negative")
        if self.mode not in ("independent", "thinned"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.thin < 1 or self.adapt_window < 1:
            raise ValidationError("thin and adapt_window must be at least 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class ChainStats:
    acceptance_rate: float
    n_samples: int
    divergences: int
    step_sizes: np.ndarray
    stuck_chains: tuple = ()


def _safe_eval(target, Q):
    logp, grad = target(Q)
    logp = np.asarray(logp, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    bad = ~np.isfinite(logp) | ~np.all(np.isfinite(grad), axis=1)
    if bad.any():
        logp = np.where(bad, -np.inf, logp)
        grad = np.where(bad[:, None], 0.0, grad)
    return logp, grad, bad


def leapfrog(target, q, p, step_size, n_steps, grad0=None):
    """Integrate Hamiltonian dynamics with unit mass.

    Parameters
    ----------
    target : callable
        Maps rows ``Q`` to ``(log_density, gradient)``.
    q, p : ndarray of shape (m, d)
        Positions and momenta of ``m`` chains.
    step_size : float or ndarray of shape (m,)
    n_steps : int
    grad0 : ndarray of shape (m, d), optional
        Gradient at ``q`` if already known.

    Returns
    -------
    q, p, logp, grad, diverged
        Final state, target values there, and a flag per chain that hit a
        non-finite position, density or gradient. Diverged chains are frozen
        at their last finite position.
    """
    q = np.array(q, dtype=np.float64, ndmin=2)
    p = np.array(p, dtype=np.float64, ndmin=2)
    eps = np.broadcast_to(np.asarray(step_size, dtype=np.float64), (len(q),))[:, None]
    if grad0 is None:
        _, grad0, diverged = _safe_eval(target, q)
    else:
        diverged = np.zeros(len(q), dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        p = p + 0.5 * eps * grad0
        for step in range(n_steps):
            q_new = q + eps * p
            bad = ~np.all(np.isfinite(q_new), axis=1)
            diverged |= bad
            q = np.where(diverged[:, None], q, q_new)
            logp, grad, bad = _safe_eval(target, q)
            diverged |= bad
            scale = 0.5 if step == n_steps - 1 else 1.0
            p = np.where(diverged[:, None], p, p + scale * eps * grad)
    return q, p, logp, grad, diverged


def _transition(target, q, logp, grad, momentum, log_u, eps, n_steps):
    H0 = -logp + 0.5 * np.einsum("ij,ij->i", momentum, momentum)
    q1, p1, logp1, grad1, diverged = leapfrog(target, q, momentum, eps, n_steps, grad0=grad)
    H1 = -logp1 + 0.5 * np.einsum("ij,ij->i", p1, p1)
    with np.errstate(invalid="ignore"):
        dH = H0 - H1
    diverged |= ~np.isfinite(dH) | (dH < -_MAX_ENERGY_ERROR)
    accept = ~diverged & (log_u < dH)
    q = np.where(accept[:, None], q1, q)
    logp = np.where(accept, logp1, logp)
    grad = np.where(accept[:, None], grad1, grad)
    return q, logp, grad, accept, diverged


def hmc_step(target, z, cfg, rng, step_size=None):
    """One HMC transition of a single chain.

    Returns
    -------
    z_new : ndarray of shape (d,)
    accepted : bool
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(z)):
        raise ValidationError("hmc_step needs a finite starting point")
    eps = cfg.step_size if step_size is None else step_size
    logp, grad, _ = _safe_eval(target, z)
    momentum = rng.standard_normal(z.shape)
    log_u = np.log(rng.random(1))
    q, _, _, accept, _ = _transition(target, z, logp, grad, momentum, log_u, eps, cfg.leapfrog_steps)
    return q[0], bool(accept[0])


def _run_chains(target, Z0, momenta, log_u, cfg, record):
    """Run ``m`` chains for ``len(momenta)`` transitions, storing states at
    the transition indices in ``record``."""
    m = len(Z0)
    eps = np.full(m, float(cfg.step_size))
    q = Z0.copy()
    logp, grad, bad = _safe_eval(target, q)
    if bad.any():
        raise NumericalError(f"target is not finite at the start of chain {np.flatnonzero(bad)[0]}")
    accepted = np.zeros(m, dtype=np.int64)
    window = np.zeros(m, dtype=np.int64)
    # Smallest step at which each chain has diverged; doubling stays below it.
    ceiling = np.full(m, np.inf)
    n_div = 0
    out = []
    record = list(record)
    for it in range(len(momenta)):
        q, logp, grad, acc, div = _transition(
            target, q, logp, grad, momenta[it], log_u[it], eps, cfg.leapfrog_steps
        )
        accepted += acc
        window += acc
        n_div += int(div.sum())
        ceiling = np.where(div, np.minimum(ceiling, eps), ceiling)
        if cfg.adapt and it < cfg.burnin and (it + 1) % cfg.adapt_window == 0:
            rate = window / cfg.adapt_window
            # no growth in the last window: an untried step is never frozen
            last = it + cfg.adapt_window >= cfg.burnin
            grow = (rate > 0.95) & (2.0 * eps < ceiling) & (not last)
            eps = np.where(rate < 0.5, 0.5 * eps, np.where(grow, 2.0 * eps, eps))
            window[:] = 0
        if record and it == record[0]:
            out.append(q.copy())
            record.pop(0)
    return np.stack(out), accepted, n_div, eps


def _latent_target(copula):
    if hasattr(copula, "log_target_latent"):
        return lambda Q: copula.log_target_latent(Q, check=False), copula.n_features_in_
    raise ValidationError("expected a fitted copula with log_target_latent")


def sample_latent(copula, n, cfg=None, target=None, dim=None):
    """Draw ``n`` latent samples.

    Parameters
    ----------
    copula : RatioCopula or None
        Fitted copula providing ``log_target_latent``. Pass ``None`` together
        with ``target`` and ``dim`` to sample an arbitrary latent density.
    n : int
    cfg : HmcConfig, optional
    target : callable, optional
        ``Q -> (log_density, gradient)`` for rows ``Q``.
    dim : int, optional

    Returns
    -------
    Z : ndarray of shape (n, d)
    stats : ChainStats
    """
    cfg = cfg or HmcConfig()
    if target is None:
        target, dim = _latent_target(copula)
    n = int(n)
    if n < 1:
        raise ValidationError("n must be at least 1")
    T = cfg.burnin + 1

    if cfg.mode == "independent":
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(n)]
        Z0 = np.empty((n, dim))
        momenta = np.empty((T, n, dim))
        log_u = np.empty((T, n))
        for k, rng in enumerate(streams):
            Z0[k] = rng.standard_normal(dim)
            momenta[:, k] = rng.standard_normal((T, dim))
            log_u[:, k] = np.log(rng.random(T))
        states, accepted, n_div, eps = _run_chains(target, Z0, momenta, log_u, cfg, [T - 1])
        Z = states[0]
        transitions = n * T
    else:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        T = cfg.burnin + n * cfg.thin
        Z0 = rng.standard_normal((1, dim))
        momenta = rng.standard_normal((T, 1, dim))
        log_u = np.log(rng.random((T, 1)))
        record = [cfg.burnin + (k + 1) * cfg.thin - 1 for k in range(n)]
        states, accepted, n_div, eps = _run_chains(target, Z0, momenta, log_u, cfg, record)
        Z = states[:, 0, :]
        transitions = T

    if n_div >= transitions:
        raise NumericalError("every HMC transition diverged; the target is not usable")
    stuck = tuple(int(k) for k in np.flatnonzero(accepted == 0))
    if stuck:
        warnings.warn(
            f"{len(stuck)} chain(s) never accepted a proposal, first is chain {stuck[0]}",
            RuntimeWarning,
            stacklevel=2,
        )
    stats = ChainStats(
        acceptance_rate=float(accepted.sum() / transitions),
        n_samples=len(Z),
        divergences=n_div,
        step_sizes=eps,
        stuck_chains=stuck,
    )
    return Z, stats


def sample_copula(copula, n, cfg=None, return_stats=False):
    """Pseudo-observations drawn from a fitted copula."""
    Z, stats = sample_latent(copula, n, cfg)
    U = latent_to_pseudo(Z)
    return (U, stats) if return_stats else U


def sample_data(copula, n, cfg=None, return_stats=False):
    """Data-scale samples through the copula's empirical quantile functions."""
    if getattr(copula, "marginals_", None) is None:
        raise ValidationError("copula has no fitted marginals for data-scale sampling")
    U, stats = sample_copula(copula, n, cfg, return_stats=True)
    X = copula.marginals_.quantile(U)
    return (X, stats) if return_stats else X
