"""State-space models built from discretised SDEs.

A :class:`ModelSpec` bundles drift, diffusion, observation model, prior and
parameter transform. Drift and diffusion are written with plain arithmetic
operators so the same callables work on numpy arrays and on autodiff nodes.
"""
import math
from dataclasses import dataclass, field, replace
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-8
MAX_RESAMPLE = 100


class ModelError(ValueError):
    pass


class DegenerateDiffusionError(ModelError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"diffusion matrix not positive definite at grid index {index}")


class InvalidVarianceError(ModelError):
    pass


class InvalidParameterError(ModelError):
    pass


class SimulationError(RuntimeError):
    pass


# numpy and autodiff "backends" for code shared between plain evaluation and
# gradient graphs
NP_OPS = SimpleNamespace(
    sqrt=np.sqrt,
    log=np.log,
    exp=np.exp,
    gaussian_logpdf=lambda x, m, v: -0.5 * (LOG_2PI + np.log(v)) - 0.5 * (x - m) ** 2 / v,
)
AD_OPS = SimpleNamespace(sqrt=ad.sqrt, log=ad.log, exp=ad.exp, gaussian_logpdf=ad.gaussian_logpdf)


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a discretised SDE state-space model.

    ``drift(x, theta)`` returns a list of ``p`` expressions and
    ``diffusion(x, theta)`` a ``p x p`` nested list; ``x`` and ``theta`` are
    lists of per-component arrays (or autodiff nodes) on the natural scale.
    """

    name: str
    state_dim: int
    obs_dim: int
    param_names: tuple
    transforms: tuple  # "exp" or "identity" per component of theta
    drift: Callable
    diffusion: Callable
    obs_matrix: np.ndarray  # F, shape (p, p0); observations are F'x
    dt: float
    n_steps: int
    x0: np.ndarray
    prior_mean: np.ndarray
    prior_sd: np.ndarray
    obs_var: Optional[float] = None  # None -> inferred through obs_sd_index
    obs_sd_index: Optional[int] = None
    positive: bool = False
    diagonal_diffusion: bool = False
    obs_stride: int = 1
    state_names: tuple = field(default=None)

    def __post_init__(self):
        if not self.dt > 0:
            raise ModelError("dt must be positive")
        if self.n_steps < 1:
            raise ModelError("n_steps must be at least 1")
        if self.obs_var is None and self.obs_sd_index is None:
            raise ModelError("either obs_var or obs_sd_index must be given")
        if self.state_names is None:
            object.__setattr__(
                self, "state_names", tuple(f"x{i + 1}" for i in range(self.state_dim))
            )

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def obs_variance(self, theta):
        if self.obs_var is not None:
            return self.obs_var
        return theta[self.obs_sd_index] ** 2

    def to_natural(self, vartheta, ops=NP_OPS):
        """Map unconstrained components (list or array, last axis) to theta."""
        comps = _components(vartheta)
        return [ops.exp(c) if t == "exp" else c for c, t in zip(comps, self.transforms)]

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = theta.copy()
        for i, t in enumerate(self.transforms):
            if t == "exp":
                if np.any(theta[..., i] <= 0):
                    raise InvalidParameterError(f"{self.param_names[i]} must be positive")
                out[..., i] = np.log(theta[..., i])
        return out

    def prior_logpdf(self, vartheta):
        vartheta = np.asarray(vartheta, dtype=float)
        return np.sum(NP_OPS.gaussian_logpdf(vartheta, self.prior_mean, self.prior_sd**2), axis=-1)


def _components(x):
    if isinstance(x, (list, tuple)):
        return list(x)
    if isinstance(x, ad.Node):
        raise TypeError("pass autodiff states as lists of components")
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(x.shape[-1])]


@dataclass
class ParameterVector:
    """Unconstrained parameters plus the bijection back to the natural scale."""

    vartheta: np.ndarray
    spec: ModelSpec

    @classmethod
    def from_natural(cls, spec, theta):
        return cls(spec.to_unconstrained(np.asarray(theta, dtype=float)), spec)

    @property
    def theta(self):
        return np.stack(self.spec.to_natural(self.vartheta), axis=-1)


@dataclass
class LatentPath:
    values: np.ndarray  # (N + 1, p)
    dt: float

    @property
    def times(self):
        return np.arange(self.values.shape[0]) * self.dt

    @property
    def n_steps(self):
        return self.values.shape[0] - 1


@dataclass
class ObservationSeries:
    """Observations on the grid; ``mask[i]`` marks presence at grid index i."""

    values: np.ndarray  # (N + 1, p0), zeros where absent
    mask: np.ndarray  # (N + 1,) bool

    def __post_init__(self):
        self.values = np.where(self.mask[:, None], self.values, 0.0)
        if not np.all(np.isfinite(self.values)):
            raise ModelError("observations must be finite")

    @property
    def observed_indices(self):
        return np.flatnonzero(self.mask)

    @property
    def n_steps(self):
        return self.values.shape[0] - 1

    def drop(self, indices):
        mask = self.mask.copy()
        mask[np.asarray(indices, dtype=int)] = False
        return ObservationSeries(self.values.copy(), mask)


# --------------------------------------------------------------------------
# densities


def increment_logpdf(resid, cov, ops=NP_OPS, diagonal=False):
    """log N(resid; 0, cov) for small p using an explicit Cholesky factor.

    ``resid`` is a list of p components, ``cov`` a nested p x p list. Works
    elementwise over any batch shape and with either backend.
    """
    p = len(resid)
    if p == 1 or diagonal:
        total = 0.0
        for i in range(p):
            total = total + ops.gaussian_logpdf(resid[i], 0.0, cov[i][i])
        return total
    chol = [[None] * p for _ in range(p)]
    for i in range(p):
        for j in range(i + 1):
            acc = cov[i][j]
            for l in range(j):
                acc = acc - chol[i][l] * chol[j][l]
            chol[i][j] = ops.sqrt(acc) if i == j else acc / chol[j][j]
    # forward substitution L u = resid
    u = []
    quad = 0.0
    logdet = 0.0
    for i in range(p):
        acc = resid[i]
        for l in range(i):
            acc = acc - chol[i][l] * u[l]
        ui = acc / chol[i][i]
        u.append(ui)
        quad = quad + ui * ui
        logdet = logdet + ops.log(chol[i][i])
    return -0.5 * p * LOG_2PI - logdet - 0.5 * quad


def _scaled_cov(spec, x_prev, theta, dt):
    beta = spec.diffusion(x_prev, theta)
    p = spec.state_dim
    return [[beta[i][j] * dt for j in range(p)] for i in range(p)]


def _check_pd(cov, p):
    """Elementwise positive-definiteness via leading minors (numpy path only)."""
    flat = np.broadcast_arrays(*[np.asarray(c, dtype=float) for row in cov for c in row])
    mats = np.stack(flat, axis=-1).reshape(flat[0].shape + (p, p))
    ok = np.ones(mats.shape[:-2], dtype=bool)
    for i in range(1, p + 1):
        ok &= np.linalg.det(mats[..., :i, :i]) > 0
    return ok


def _em_logpdf_np(spec, x_prev, x_next, theta, first_index=0):
    p = spec.state_dim
    xp = _components(x_prev)
    xn = _components(x_next)
    drift = spec.drift(xp, theta)
    cov = _scaled_cov(spec, xp, theta, spec.dt)
    cov = [[np.asarray(c, dtype=float) for c in row] for row in cov]
    ok = _check_pd(cov, p)
    if not np.all(ok):
        cov = [[c + (JITTER if i == j else 0.0) for j, c in enumerate(row)] for i, row in enumerate(cov)]
        ok = _check_pd(cov, p)
        if not np.all(ok):
            bad = np.flatnonzero(~np.atleast_1d(ok))[0]
            raise DegenerateDiffusionError(first_index + int(bad))
    resid = [xn[i] - xp[i] - drift[i] * spec.dt for i in range(p)]
    return increment_logpdf(resid, cov, NP_OPS, spec.diagonal_diffusion)


def em_transition_logpdf(spec, x_prev, x_next, theta):
    """Euler-Maruyama log-density of ``x_next`` given ``x_prev``.

    ``theta`` is on the natural scale. Leading axes of the states are
    treated as a batch.
    """
    theta = _components(theta)
    return _em_logpdf_np(spec, x_prev, x_next, theta)


def em_moments(spec, x_prev, theta):
    """Mean and covariance of the Euler-Maruyama increment."""
    xp = _components(np.asarray(x_prev, dtype=float))
    theta = _components(theta)
    drift = np.array([d * spec.dt for d in np.broadcast_arrays(*spec.drift(xp, theta))])
    cov = np.array(
        [[np.broadcast_to(c, np.shape(xp[0])) for c in row] for row in _scaled_cov(spec, xp, theta, spec.dt)],
        dtype=float,
    )
    return drift, cov


def obs_logpdf(spec, x, y, theta):
    """log N(y; F'x, sigma^2 I) for one or a batch of states."""
    theta = _components(theta)
    var = np.asarray(spec.obs_variance(theta), dtype=float)
    if np.any(var <= 0):
        raise InvalidVarianceError("observation variance must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ModelError("observation must be finite")
    mean = x @ spec.obs_matrix
    return np.sum(NP_OPS.gaussian_logpdf(y, mean, var[..., None] if var.ndim else var), axis=-1)


def joint_logpdf(spec, path, obs, vartheta):
    """log p(vartheta) + sum of EM transitions + sum over observed indices.

    The initial state is fixed, so there is no p(x_0) term.
    """
    values = path.values if isinstance(path, LatentPath) else np.asarray(path, dtype=float)
    if values.shape[0] != obs.values.shape[0]:
        raise ModelError("path and observations must share the grid")
    vartheta = np.asarray(vartheta, dtype=float)
    theta = spec.to_natural(vartheta)
    total = float(spec.prior_logpdf(vartheta))
    total += float(np.sum(_em_logpdf_np(spec, values[:-1], values[1:], theta, first_index=1)))
    idx = obs.observed_indices
    if idx.size:
        total += float(np.sum(obs_logpdf(spec, values[idx], obs.values[idx], theta)))
    return total


# --------------------------------------------------------------------------
# exact OU transitions


def ou_exact_moments(theta, x_t, dt):
    theta1, theta2, theta3 = (float(t) for t in theta[:3])
    if theta1 <= 0:
        raise InvalidParameterError("theta1 must be positive")
    decay = math.exp(-theta1 * dt)
    mean = np.asarray(x_t, dtype=float) * decay + theta2 * (1.0 - decay)
    var = theta3**2 / (2.0 * theta1) * -math.expm1(-2.0 * theta1 * dt)
    return mean, var


def ou_exact_step(theta, x_t, dt, rng):
    mean, var = ou_exact_moments(theta, x_t, dt)
    return mean + math.sqrt(var) * rng.standard_normal(np.shape(mean))


def ou_exact_transition_logpdf(theta, x_t, x_next, dt):
    mean, var = ou_exact_moments(theta, x_t, dt)
    return NP_OPS.gaussian_logpdf(np.asarray(x_next, dtype=float), mean, var)


# --------------------------------------------------------------------------
# simulation


def simulate(spec, theta, scheme="euler-maruyama", obs_stride=None, seed=None):
    """Simulate a latent path from ``x0`` and noisy observations.

    ``scheme`` is ``"exact-ou"`` or ``"euler-maruyama"``. Observations are
    taken at every ``obs_stride``-th grid index starting at 0.
    """
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=float)
    obs_stride = spec.obs_stride if obs_stride is None else int(obs_stride)
    n, p = spec.n_steps, spec.state_dim
    x = np.empty((n + 1, p))
    x[0] = spec.x0
    if scheme == "exact-ou":
        if spec.name != "ou":
            raise ModelError("exact-ou scheme requires the OU model")
        for i in range(n):
            x[i + 1] = ou_exact_step(theta, x[i], spec.dt, rng)
    elif scheme == "euler-maruyama":
        comps = list(theta)
        for i in range(n):
            x[i + 1] = _em_step(spec, x[i], comps, rng, i + 1)
    else:
        raise ModelError(f"unknown scheme {scheme!r}")

    mask = np.zeros(n + 1, dtype=bool)
    mask[::obs_stride] = True
    var = float(spec.obs_variance(list(theta)))
    mean = x @ spec.obs_matrix
    noise = rng.standard_normal(mean.shape) * math.sqrt(max(var, 0.0))
    y = np.where(mask[:, None], mean + noise, 0.0)
    return LatentPath(x, spec.dt), ObservationSeries(y, mask)


def _em_step(spec, x, theta, rng, index):
    p = spec.state_dim
    comps = [np.float64(v) for v in x]
    drift = np.array([float(d) for d in spec.drift(comps, theta)]) * spec.dt
    cov = np.array([[float(c) for c in row] for row in _scaled_cov(spec, comps, theta, spec.dt)])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(cov + JITTER * np.eye(p))
        except np.linalg.LinAlgError:
            raise DegenerateDiffusionError(index) from None
    for _ in range(MAX_RESAMPLE):
        proposal = x + drift + chol @ rng.standard_normal(p)
        if not spec.positive or np.all(proposal > 0):
            return proposal
    raise SimulationError(
        f"state left the positive orthant at grid index {index} after {MAX_RESAMPLE} draws"
    )


# --------------------------------------------------------------------------
# built-in models


def _ou_drift(x, theta):
    return [theta[0] * (theta[1] - x[0])]


def _ou_diffusion(x, theta):
    return [[theta[2] * theta[2]]]


def builtin_ou(n_steps=200, dt=0.1, x0=20.0, obs_var=1.0):
    """Ornstein-Uhlenbeck: dX = theta1 (theta2 - X) dt + theta3 dW."""
    return ModelSpec(
        name="ou",
        state_dim=1,
        obs_dim=1,
        param_names=("theta1", "theta2", "theta3"),
        transforms=("exp", "identity", "exp"),
        drift=_ou_drift,
        diffusion=_ou_diffusion,
        obs_matrix=np.eye(1),
        dt=dt,
        n_steps=n_steps,
        x0=np.array([x0]),
        prior_mean=np.zeros(3),
        prior_sd=np.full(3, 10.0),
        obs_var=obs_var,
        positive=False,
        obs_stride=1,
        state_names=("x",),
    )


def _sir_drift(x, theta):
    s, i = x
    infection = theta[0] * s * i
    return [-infection, infection - theta[1] * i]


def _sir_diffusion(x, theta):
    s, i = x
    infection = theta[0] * s * i
    return [[infection, -infection], [-infection, infection + theta[1] * i]]


def builtin_sir(n_steps=140, dt=0.1, x0=(762.0, 1.0), obs_stride=10):
    """Chemical-Langevin SIR over (S, I) with I observed and noise sd inferred."""
    return ModelSpec(
        name="sir",
        state_dim=2,
        obs_dim=1,
        param_names=("theta1", "theta2", "sigma"),
        transforms=("exp", "exp", "exp"),
        drift=_sir_drift,
        diffusion=_sir_diffusion,
        obs_matrix=np.array([[0.0], [1.0]]),
        dt=dt,
        n_steps=n_steps,
        x0=np.asarray(x0, dtype=float),
        prior_mean=np.zeros(3),
        prior_sd=np.full(3, 10.0),
        obs_var=None,
        obs_sd_index=2,
        positive=True,
        obs_stride=obs_stride,
        state_names=("S", "I"),
    )


BUILTIN = {"ou": builtin_ou, "sir": builtin_sir}


def get_model(name, **overrides):
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}") from None
    return factory(**overrides)


def with_steps(spec, n_steps):
    return replace(spec, n_steps=int(n_steps))
