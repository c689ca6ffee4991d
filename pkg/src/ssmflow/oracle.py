"""Exact OU posterior via the forward filter and random-walk Metropolis.

The OU process has Gaussian transitions, so with Gaussian observations the
latent path can be integrated out exactly and the parameter posterior
sampled directly. This is the ground truth the variational fit is checked
against.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _kernels
from .models import InvalidParameterError, InvalidVarianceError, builtin_ou

LOG_2PI = math.log(2.0 * math.pi)


class StuckChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterState:
    mean: float  # a_i
    var: float  # c_i
    loglik: float


def _gauss_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + math.log(var)) - 0.5 * (x - mean) ** 2 / var


def ff_init(a, c, obs_var, y0=None):
    """Condition the prior N(a, c) of x_0 on the first observation."""
    if c < 0:
        raise InvalidVarianceError("prior variance must be non-negative")
    if obs_var <= 0 or c + obs_var <= 0:
        raise InvalidVarianceError("observation variance must be positive")
    if y0 is None:
        return FilterState(float(a), float(c), 0.0)
    s = c + obs_var
    loglik = _gauss_logpdf(y0, a, s)
    return FilterState(a + c / s * (y0 - a), c * obs_var / s, loglik)


def ou_transition_coefficients(theta, dt, exact=True):
    """(decay, offset, variance) of the OU transition, exact or Euler-Maruyama."""
    theta1, theta2, theta3 = (float(t) for t in theta[:3])
    if theta1 <= 0:
        raise InvalidParameterError("theta1 must be positive")
    return _kernels.ou_coefficients(theta1, theta2, theta3, dt, exact)


def ff_step(state, theta, dt, obs_var, y_next=None, exact=True):
    """Propagate one grid step and, if observed, update on ``y_next``.

    Prior at the next time is N(a e^{-theta1 dt} + theta2 (1 - e^{-theta1 dt}),
    q + c e^{-2 theta1 dt}); the observation variance enters only the
    forecast and the gain.
    """
    if obs_var <= 0:
        raise InvalidVarianceError("observation variance must be positive")
    decay, offset, q = ou_transition_coefficients(theta, dt, exact)
    mean = state.mean * decay + offset
    var = q + state.var * decay * decay
    if y_next is None:
        return FilterState(mean, var, state.loglik)
    s = var + obs_var
    loglik = state.loglik + _gauss_logpdf(y_next, mean, s)
    return FilterState(mean + var / s * (y_next - mean), var * obs_var / s, loglik)


def ff_marginal_loglik(theta, obs, dt, obs_var, x0, exact=True):
    """log p(y | theta) for the OU model with fixed initial state ``x0``.

    ``exact=False`` filters the Euler-Maruyama discretisation instead of the
    exact transition, which is the model the variational fit targets.
    """
    if obs_var <= 0:
        raise InvalidVarianceError("observation variance must be positive")
    decay, offset, q = ou_transition_coefficients(theta, dt, exact)
    y = np.ascontiguousarray(obs.values[:, 0], dtype=np.float64)
    return float(
        _kernels.filter_loglik(y, obs.mask.astype(np.bool_), decay, offset, q, float(obs_var), float(np.ravel(x0)[0]), 0.0)
    )


def ff_filter(theta, obs, dt, obs_var, x0, exact=True):
    """Step-by-step filter returning every :class:`FilterState`."""
    states = [ff_init(float(np.ravel(x0)[0]), 0.0, obs_var, obs.values[0, 0] if obs.mask[0] else None)]
    for i in range(1, obs.values.shape[0]):
        y = obs.values[i, 0] if obs.mask[i] else None
        states.append(ff_step(states[-1], theta, dt, obs_var, y, exact))
    return states


@dataclass
class MHChain:
    samples: np.ndarray  # (draws, 3) on the unconstrained scale
    accepted: int
    scales: np.ndarray
    seed: int

    @property
    def acceptance_rate(self):
        return self.accepted / max(len(self.samples), 1)

    @property
    def theta(self):
        out = self.samples.copy()
        out[:, 0] = np.exp(out[:, 0])
        out[:, 2] = np.exp(out[:, 2])
        return out

    def summary(self, spec=None):
        spec = spec or builtin_ou()
        names = spec.param_names
        vt, th = self.samples, self.theta
        return {
            "acceptance_rate": self.acceptance_rate,
            "draws": int(len(vt)),
            "seed": self.seed,
            "vartheta_mean": dict(zip(names, vt.mean(axis=0).tolist())),
            "vartheta_sd": dict(zip(names, vt.std(axis=0, ddof=1).tolist())),
            "theta_mean": dict(zip(names, th.mean(axis=0).tolist())),
            "theta_sd": dict(zip(names, th.std(axis=0, ddof=1).tolist())),
        }


def log_target(vartheta, obs, spec=None, exact=True):
    spec = spec or builtin_ou()
    y = np.ascontiguousarray(obs.values[:, 0], dtype=np.float64)
    return float(
        _kernels.ou_log_target(
            np.asarray(vartheta, dtype=np.float64), y, obs.mask.astype(np.bool_), spec.dt,
            float(spec.obs_var), float(spec.x0[0]), spec.prior_mean.astype(np.float64),
            spec.prior_sd.astype(np.float64), exact,
        )
    )


def find_mode(obs, spec=None, exact=True, start=None):
    spec = spec or builtin_ou()
    if start is None:
        # long-run level from the last observations
        start = np.array([0.0, float(np.mean(obs.values[obs.mask][-20:, 0])), 0.0])
    start = np.asarray(start, dtype=float)
    res = optimize.minimize(
        lambda v: -log_target(v, obs, spec, exact) if np.all(np.abs(v) < 50) else np.inf,
        start,
        method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 5000},
    )
    return res.x


def random_walk_metropolis(
    log_target, target_args, init, iters, burn_in, seed, scales=None, adapt_every=100,
    target_rate=0.25,
):
    """Adaptive-during-burn-in random-walk Metropolis on any jitted target.

    Returns (post burn-in draws, accepted count, final step sizes).
    """
    if iters <= burn_in:
        raise ValueError("iters must exceed burn_in")
    init = np.asarray(init, dtype=np.float64)
    d = init.size
    rng = np.random.default_rng(seed)
    scales = np.full(d, 0.1) if scales is None else np.asarray(scales, dtype=np.float64)
    noise = rng.standard_normal((iters, d))
    log_u = np.log(rng.random(iters))
    return _kernels.rwmh(
        log_target, tuple(target_args), init, scales, noise, log_u, int(burn_in),
        int(adapt_every), float(target_rate),
    )


def rwmh_posterior(
    obs, prior=None, iters=60_000, burn_in=10_000, seed=0, init=None, exact=True,
    adapt_every=100, target_rate=0.25,
):
    """Sample p(vartheta | y) for the OU model with random-walk Metropolis.

    ``prior`` is an OU :class:`~ssmflow.models.ModelSpec` supplying the
    Gaussian prior on vartheta and the fixed ``dt``, ``x0`` and observation
    variance. Returns ``iters - burn_in`` post burn-in draws.
    """
    spec = prior or builtin_ou(n_steps=obs.n_steps)
    init = find_mode(obs, spec, exact) if init is None else np.asarray(init, dtype=float)
    target_args = (
        np.ascontiguousarray(obs.values[:, 0], dtype=np.float64), obs.mask.astype(np.bool_),
        float(spec.dt), float(spec.obs_var), float(spec.x0[0]),
        spec.prior_mean.astype(np.float64), spec.prior_sd.astype(np.float64), bool(exact),
    )
    chain, accepted, step = random_walk_metropolis(
        _kernels.ou_log_target, target_args, init, iters, burn_in, seed,
        adapt_every=adapt_every, target_rate=target_rate,
    )
    if accepted == 0:
        raise StuckChainError("no proposals accepted after burn-in")
    return MHChain(chain, int(accepted), step, int(seed))
