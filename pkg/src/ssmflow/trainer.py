"""ELBO maximisation with reparameterised gradients, Adam and tempering."""
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .flows import VariationalFamily
from .models import AD_OPS, increment_logpdf


class TrainingError(RuntimeError):
    """Non-finite or saturated samples persisted after every retry."""

    def __init__(self, message, iteration=None, diagnostics=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    n: int = 50
    m: int = 5
    k: int = 10
    lr: float = 1e-3
    iters: int = 10_000
    alpha0: float = 4.0
    horizon_frac: float = 0.25
    window: int = 500
    threshold: float = 0.01
    seed: int = 0
    hidden: int = 20
    depth: int = 5
    theta_layers: int = 5
    early_stop: bool = True
    tempered: bool = True
    max_retries: int = 5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be at least 1")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if self.alpha0 < 1:
            raise ValueError("alpha0 must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def horizon(self):
        return int(round(self.horizon_frac * self.iters))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainReport:
    trace: list = field(default_factory=list)  # plain (alpha = 1) ELBO estimate
    alphas: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    wallclock: float = 0.0
    stopped_early: bool = False
    redraws: int = 0
    params: np.ndarray = None  # final snapshot, saved via the weights manifest

    @property
    def iterations(self):
        return len(self.trace)

    def to_dict(self):
        return {
            "trace": [float(v) for v in self.trace],
            "alphas": [float(a) for a in self.alphas],
            "iterations": self.iterations,
            "config": self.config,
            "seed": self.seed,
            "stopped_early": self.stopped_early,
            "redraws": self.redraws,
            "meta": {"wallclock_seconds": self.wallclock},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# schedule and optimiser


def temper_alpha(iteration, config):
    """Linear decay from alpha0 at iteration 0 to exactly 1 at the horizon."""
    horizon = config.horizon
    if iteration >= horizon or config.alpha0 == 1:
        return 1.0
    return config.alpha0 + (1.0 - config.alpha0) * iteration / horizon


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


def adam_step(store, grad, state, lr):
    """One Adam step minimising the objective whose gradient is ``grad``."""
    data = store.data if isinstance(store, ad.ParameterStore) else store
    grad = np.asarray(grad, dtype=float)
    if grad.shape != data.shape:
        raise ValueError("gradient shape does not match parameters")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# --------------------------------------------------------------------------
# objectives


def _model_logpdf(spec, obs, vartheta, x):
    """log p(x_{1:N} | theta) + log p(y | x, theta) per sample, as a node.

    ``vartheta``: (n, d); ``x``: (n, N, p). The initial state is fixed.
    """
    p = spec.state_dim
    n_time = obs.n_steps
    theta = [ad.reshape(c, (-1, 1)) for c in _split(vartheta, spec.n_params)]
    theta = [ad.exp(c) if t == "exp" else c for c, t in zip(theta, spec.transforms)]
    start = np.zeros((n_time, p))
    start[0] = spec.x0
    prev = ad.window(x, 1) + ad.const(start)
    xp = _split(prev, p)
    xn = _split(x, p)
    drift = spec.drift(xp, theta)
    beta = spec.diffusion(xp, theta)
    cov = [[beta[i][j] * spec.dt for j in range(p)] for i in range(p)]
    resid = [xn[i] - xp[i] - drift[i] * spec.dt for i in range(p)]
    trans = ad.sum_(increment_logpdf(resid, cov, AD_OPS, spec.diagonal_diffusion), axis=-1)

    var = spec.obs_var if spec.obs_var is not None else ad.square(theta[spec.obs_sd_index])
    mask = obs.mask[1:].astype(float)
    total = trans
    if mask.any():
        y = np.where(obs.mask[1:, None], obs.values[1:], 0.0)
        mean = ad.matmul(x, ad.const(spec.obs_matrix))
        var_b = var if not isinstance(var, ad.Node) else ad.reshape(var, (-1, 1, 1))
        terms = ad.gaussian_logpdf(ad.const(y), mean, var_b) * ad.const(mask[:, None])
        total = total + ad.sum_(ad.sum_(terms, axis=-1), axis=-1)
    if obs.mask[0]:
        mean0 = ad.const(spec.x0 @ spec.obs_matrix)
        var0 = var if not isinstance(var, ad.Node) else ad.reshape(var, (-1, 1))
        total = total + ad.sum_(ad.gaussian_logpdf(ad.const(obs.values[0]), mean0, var0), axis=-1)
    return total


def _split(node, count):
    return [ad.take(node, i) for i in range(count)]


def _prior_logpdf(spec, vartheta):
    var = ad.const(spec.prior_sd**2)
    return ad.sum_(ad.gaussian_logpdf(vartheta, ad.const(spec.prior_mean), var), axis=-1)


class _Objective:
    """A batched per-sample ELBO graph built once and re-evaluated.

    Subclasses set ``self.inputs`` (placeholder name -> per-sample shape),
    ``self.plus``/``self.minus`` (nodes whose per-sample values add up to
    the plain alpha = 1 ELBO), ``self.loss`` (negated, possibly tempered,
    mean) and ``self.watch`` (nodes whose saturation or non-finiteness
    marks a sample bad). All of them are ancestors of ``self.loss``.
    """

    store = None

    def draw(self, rng, n):
        return {name: rng.standard_normal((n,) + shape) for name, shape in self.inputs.items()}

    def bindings(self, noise, alpha):
        out = dict(noise)
        if self.tempered:
            out["alpha"] = np.float64(alpha)
        return out

    def per_sample(self):
        total = np.zeros(self.n)
        for node in self.plus:
            total = total + node.value
        for node in self.minus:
            total = total - node.value
        return total

    def _bad_rows(self):
        vals = self.per_sample()
        bad = ~np.isfinite(vals)
        for node in self.watch:
            v = node.value
            if v is None:
                continue
            v = v.reshape(v.shape[0], -1)
            bad |= np.any((v == 0.0) | (v == 1.0) | ~np.isfinite(v), axis=1)
        return bad

    def evaluate(self, rng, alpha, max_retries=5, iteration=None):
        """Forward + backward with per-sample redraws of bad samples.

        Returns (plain ELBO mean, gradient of the loss, redraw count).
        """
        n = self.n
        noise = self.draw(rng, n)
        redraws = 0
        for attempt in range(max_retries + 1):
            with np.errstate(all="ignore"):
                ad.forward(self.loss, self.bindings(noise, alpha), check_finite=False)
            bad = self._bad_rows()
            if not bad.any() and np.isfinite(self.loss.value):
                grad = ad.backward(self.loss, self.store)
                if np.all(np.isfinite(grad)):
                    return float(np.mean(self.per_sample())), grad, redraws
                bad = np.ones(n, dtype=bool)
            if attempt == max_retries:
                break
            fresh = self.draw(rng, int(bad.sum()))
            for name in noise:
                noise[name][bad] = fresh[name]
            redraws += int(bad.sum())
        raise TrainingError(
            f"{int(bad.sum())} of {n} samples still non-finite or saturated after "
            f"{max_retries} redraws",
            iteration,
            {"bad_rows": np.flatnonzero(bad).tolist(), "alpha": alpha},
        )


class ElboObjective(_Objective):
    """Joint ELBO for a state-space model and a :class:`VariationalFamily`.

    With ``fixed_vartheta`` q(vartheta) is a point mass: the prior and
    log q(vartheta) drop out and only q(x | vartheta) is fitted.
    """

    def __init__(self, spec, obs, family, n, tempered=True, fixed_vartheta=None):
        self.spec, self.obs, self.family, self.n = spec, obs, family, n
        self.store = family.store
        self.tempered = tempered and fixed_vartheta is None
        self.inputs = {"z_x": (obs.n_steps, spec.state_dim)}
        z_x = ad.placeholder("z_x")
        if fixed_vartheta is None:
            self.inputs["z_theta"] = (spec.n_params,)
            z_theta = ad.placeholder("z_theta")
            vartheta, log_q_theta, local = family.graph(z_theta, z_x)
            prior = _prior_logpdf(spec, vartheta)
        else:
            fixed = np.asarray(fixed_vartheta, dtype=float).reshape(1, -1)
            vartheta = ad.const(np.repeat(fixed, n, axis=0))
            _, log_q_theta, local = family.graph(None, z_x, fixed_vartheta=vartheta)
            prior = None
        loglik = _model_logpdf(spec, obs, vartheta, local["x"])
        objective = loglik - local["log_q"]
        self.plus, self.minus = [loglik], [local["log_q"]]
        if prior is not None:
            if self.tempered:
                objective = objective + prior - ad.placeholder("alpha") * log_q_theta
            else:
                objective = objective + prior - log_q_theta
            self.plus.append(prior)
            self.minus.append(log_q_theta)
        self.loss = ad.neg(ad.sum_(objective)) / float(n)
        self.watch = list(local["sigmas"]) + list(local["theta_sigmas"])
        self.nodes = {"vartheta": vartheta, "x": local["x"], "log_q_x": local["log_q"],
                      "log_q_theta": log_q_theta, "loglik": loglik}


class GlobalObjective(_Objective):
    """ELBO for a parameter-only model: q(vartheta) from a :class:`GlobalFlow`.

    ``log_joint(vartheta_node)`` must return a per-sample (n,) node for
    log p(vartheta) + log p(y | vartheta).
    """

    def __init__(self, flow, store, log_joint, n, tempered=True):
        self.flow, self.store, self.n, self.tempered = flow, store, n, tempered
        self.inputs = {"z_theta": (flow.dim,)}
        vartheta, log_q, sigmas = flow.graph(ad.placeholder("z_theta"))
        joint = log_joint(vartheta)
        self.plus, self.minus = [joint], [log_q]
        if tempered:
            objective = joint - ad.placeholder("alpha") * log_q
        else:
            objective = joint - log_q
        self.loss = ad.neg(ad.sum_(objective)) / float(n)
        self.watch = list(sigmas)
        self.nodes = {"vartheta": vartheta, "log_q_theta": log_q}


# --------------------------------------------------------------------------
# estimation and training


def elbo_estimate(spec, family, obs, n, alpha, rng, tempered=True, fixed_vartheta=None):
    """One Monte Carlo ELBO estimate and the gradient of its negation.

    Returns (plain ELBO estimate, gradient of the negated tempered
    objective w.r.t. the family's flat parameters).
    """
    if alpha < 1:
        raise ValueError("alpha must be at least 1")
    objective = ElboObjective(spec, obs, family, n, tempered, fixed_vartheta)
    value, grad, _ = objective.evaluate(rng, alpha)
    return value, grad


def iteration_rng(seed, iteration):
    return np.random.default_rng([int(seed), int(iteration)])


def _converged(trace, window, threshold):
    if len(trace) < 2 * window:
        return False
    recent = np.mean(trace[-window:])
    before = np.mean(trace[-2 * window : -window])
    return recent - before < threshold


def run_objective(objective, config, report=None, callback=None):
    """Adam loop shared by every objective; mutates ``objective.store``."""
    report = report or TrainReport(config=asdict(config), seed=config.seed)
    state = AdamState.zeros(len(objective.store))
    start = time.perf_counter()
    for it in range(config.iters):
        alpha = temper_alpha(it, config) if objective.tempered else 1.0
        value, grad, redraws = objective.evaluate(
            iteration_rng(config.seed, it), alpha, config.max_retries, it
        )
        adam_step(objective.store, grad, state, config.lr)
        report.trace.append(value)
        report.alphas.append(alpha)
        report.redraws += redraws
        if callback is not None:
            callback(it, value, alpha)
        if (
            config.early_stop
            and it + 1 >= config.horizon
            and _converged(report.trace, config.window, config.threshold)
        ):
            report.stopped_early = True
            break
    report.wallclock = time.perf_counter() - start
    report.params = objective.store.copy_values()
    return report


def build_family(spec, obs, config):
    return VariationalFamily(
        spec, obs, m=config.m, k=config.k, hidden=config.hidden, depth=config.depth,
        theta_layers=config.theta_layers, seed=config.seed,
    )


def train(spec, obs, config, family=None, fixed_vartheta=None, callback=None):
    """Fit the variational family; returns (TrainReport, family)."""
    family = family or build_family(spec, obs, config)
    if config.iters == 0:
        report = TrainReport(config=asdict(config), seed=config.seed)
        report.params = family.store.copy_values()
        return report, family
    objective = ElboObjective(spec, obs, family, config.n, config.tempered, fixed_vartheta)
    return run_objective(objective, config, callback=callback), family


def posterior_sample(family, count, seed):
    """Independent draws from the fitted q; returns a dict of arrays.

    ``x`` covers t_1..t_N; ``path`` prepends the fixed initial state.
    """
    spec = family.spec
    n_time, p, d = family.n_steps, spec.state_dim, spec.n_params
    if count == 0:
        return {
            "vartheta": np.zeros((0, d)),
            "theta": np.zeros((0, d)),
            "x": np.zeros((0, n_time, p)),
            "path": np.zeros((0, n_time + 1, p)),
            "log_q_theta": np.zeros(0),
            "log_q_x": np.zeros(0),
        }
    draws = family.sample(count, np.random.default_rng(seed))
    theta = np.stack(spec.to_natural(draws["vartheta"]), axis=-1)
    x0 = np.broadcast_to(spec.x0, (count, 1, p))
    draws["theta"] = theta
    draws["path"] = np.concatenate([x0, draws["x"]], axis=1)
    return draws


def trace_slope(trace, frac=0.1, smooth=None):
    """Least-squares slope (nats per 100 iterations) over the last ``frac``."""
    trace = np.asarray(trace, dtype=float)
    tail = trace[-max(int(len(trace) * frac), 2) :]
    if smooth:
        kernel = np.ones(smooth) / smooth
        tail = np.convolve(tail, kernel, mode="valid")
    t = np.arange(tail.size)
    return float(np.polyfit(t, tail, 1)[0] * 100.0)

