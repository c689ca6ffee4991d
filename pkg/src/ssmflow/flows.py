"""Variational family: a masked autoregressive flow for the global parameters
and a stack of local inverse autoregressive flows for the latent path.

Local layers use the gated update ``z' = sigma * z + (1 - sigma) * mu`` where
(mu, sigma) at time ``t`` come from a small MLP applied to the previous
layer's values at the ``k`` preceding times, matching observation features
and the sampled parameters. Even-numbered layers run on the time-reversed
sequence. Every function here builds autodiff graphs; the ``*_sample``
helpers evaluate them for plain arrays.
"""
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import autodiff as ad
from .models import em_moments, obs_logpdf

SIGMA_BIAS = 2.0


class SaturationError(FloatingPointError):
    """A conditioner produced sigma of exactly 0 or 1."""


# --------------------------------------------------------------------------
# observation features


@dataclass
class FeatureWindows:
    """Per-grid-index windows of (value, presence) observation features.

    ``forward[i, s - 1]`` describes y at grid index ``i - s``; ``backward[i,
    s - 1]`` describes ``i + s``. Indices off the grid are zero padding.
    Values are standardised with ``loc``/``scale`` of the observed data.
    """

    forward: np.ndarray  # (N + 1, k, 2 * p0)
    backward: np.ndarray
    k: int
    loc: np.ndarray
    scale: np.ndarray

    @property
    def width(self):
        return self.forward.shape[1] * self.forward.shape[2]

    def rows(self, reverse=False):
        """Flattened windows for grid times t_1..t_N in processing order."""
        if not reverse:
            return self.forward[1:].reshape(self.forward.shape[0] - 1, -1)
        return self.backward[1:][::-1].reshape(self.backward.shape[0] - 1, -1)


def build_feature_windows(obs, k):
    if k < 1:
        raise ValueError("k must be at least 1")
    values, mask = obs.values, obs.mask
    n_grid, p0 = values.shape
    if mask.any():
        loc = values[mask].mean(axis=0)
        scale = values[mask].std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        loc, scale = np.zeros(p0), np.ones(p0)
    feat = np.zeros((n_grid, 2 * p0))
    feat[mask, :p0] = (values[mask] - loc) / scale
    feat[mask, p0:] = 1.0
    fwd = np.zeros((n_grid, k, 2 * p0))
    bwd = np.zeros((n_grid, k, 2 * p0))
    for s in range(1, k + 1):
        if s < n_grid:
            fwd[s:, s - 1] = feat[:-s]
            bwd[:-s, s - 1] = feat[s:]
    return FeatureWindows(fwd, bwd, k, loc, scale)


# --------------------------------------------------------------------------
# networks


def _he(rng, fan_in, shape):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class ConditionerNet:
    """ReLU MLP from (window, features, vartheta) to per-time (mu, sigma).

    The first layer has one weight block per input group so the three inputs
    never need concatenating; the two heads start at zero weights so a fresh
    net outputs mu = 0 and sigma = sigmoid(sigma_bias) everywhere.
    """

    def __init__(self, store, prefix, in_dims, out_dim, hidden=20, depth=5, rng=None,
                 sigma_bias=SIGMA_BIAS):
        rng = np.random.default_rng() if rng is None else rng
        self.store = store
        self.prefix = prefix
        self.in_dims = dict(in_dims)
        self.out_dim = out_dim
        fan_in = sum(self.in_dims.values())
        self.w_in = {
            name: store.add(f"{prefix}.w_in.{name}", _he(rng, fan_in, (dim, hidden)))
            for name, dim in self.in_dims.items()
            if dim > 0
        }
        self.b_in = store.add(f"{prefix}.b_in", np.zeros(hidden))
        self.hidden = []
        for layer in range(1, depth):
            w = store.add(f"{prefix}.w{layer}", _he(rng, hidden, (hidden, hidden)))
            b = store.add(f"{prefix}.b{layer}", np.zeros(hidden))
            self.hidden.append((w, b))
        self.w_mu = store.add(f"{prefix}.w_mu", np.zeros((hidden, out_dim)))
        self.b_mu = store.add(f"{prefix}.b_mu", np.zeros(out_dim))
        self.w_sigma = store.add(f"{prefix}.w_sigma", np.zeros((hidden, out_dim)))
        self.b_sigma = store.add(f"{prefix}.b_sigma", np.full(out_dim, float(sigma_bias)))

    def graph(self, **inputs):
        """Return (mu, sigma pre-activation) nodes; inputs broadcast together.

        The window block (the only input that varies over both samples and
        time) goes through the fused dense op; the others fold into its bias.
        """
        names = list(self.w_in)
        lead = "window" if "window" in self.w_in else names[0]
        bias = self.b_in
        for name in names:
            if name != lead:
                bias = ad.matmul(inputs[name], self.w_in[name]) + bias
        h = ad.dense(inputs[lead], self.w_in[lead], bias, relu=True)
        for w, b in self.hidden:
            h = ad.dense(h, w, b, relu=True)
        mu = ad.dense(h, self.w_mu, self.b_mu)
        logit = ad.dense(h, self.w_sigma, self.b_sigma)
        return mu, logit


class MADE:
    """Masked MLP whose output ``i`` depends only on inputs ``< i``."""

    def __init__(self, store, prefix, dim, hidden=20, depth=5, rng=None, sigma_bias=SIGMA_BIAS):
        rng = np.random.default_rng() if rng is None else rng
        self.dim = dim
        in_deg = np.arange(1, dim + 1)
        hid_deg = (np.arange(hidden) % max(dim - 1, 1)) + 1
        masks = [(hid_deg[None, :] >= in_deg[:, None]).astype(float)]
        masks += [(hid_deg[None, :] >= hid_deg[:, None]).astype(float)] * (depth - 1)
        out_mask = (in_deg[None, :] > hid_deg[:, None]).astype(float)
        self.masks = [ad.const(m) for m in masks]
        self.out_mask = ad.const(out_mask)
        self.layers = []
        fan_in = dim
        for layer, mask in enumerate(masks):
            w = store.add(f"{prefix}.w{layer}", _he(rng, fan_in, mask.shape))
            b = store.add(f"{prefix}.b{layer}", np.zeros(hidden))
            self.layers.append((w, b))
            fan_in = hidden
        self.w_mu = store.add(f"{prefix}.w_mu", np.zeros((hidden, dim)))
        self.b_mu = store.add(f"{prefix}.b_mu", np.zeros(dim))
        self.w_sigma = store.add(f"{prefix}.w_sigma", np.zeros((hidden, dim)))
        self.b_sigma = store.add(f"{prefix}.b_sigma", np.full(dim, float(sigma_bias)))

    def graph(self, u):
        h = u
        for (w, b), mask in zip(self.layers, self.masks):
            h = ad.dense(h, w * mask, b, relu=True)
        mu = ad.dense(h, self.w_mu * self.out_mask, self.b_mu)
        logit = ad.dense(h, self.w_sigma * self.out_mask, self.b_sigma)
        return mu, logit


def _gate(u, mu, logit):
    """z' = sigma u + (1 - sigma) mu; returns (z', log sigma, sigma)."""
    sigma = ad.sigmoid(logit)
    out = u * sigma + mu * ad.sigmoid(ad.neg(logit))
    return out, ad.log_sigmoid(logit), sigma


def _permute(u, order):
    return ad.stack([ad.take(u, int(i)) for i in order])


# --------------------------------------------------------------------------
# flows


class GlobalFlow:
    """Composed masked autoregressive layers over vartheta.

    Each layer works in its own seeded random ordering and writes back in
    canonical order. A final per-dimension affine (log-scale, shift) starts
    at the exact inverse of the layers' initial contraction, so the fresh
    flow is the identity map.
    """

    def __init__(self, store, dim, n_layers=5, hidden=20, depth=5, rng=None, orders=None,
                 prefix="theta", loc=None):
        rng = np.random.default_rng() if rng is None else rng
        self.dim = dim
        self.n_layers = n_layers
        if orders is None:
            orders = [np.arange(dim)] + [rng.permutation(dim) for _ in range(n_layers - 1)]
        self.orders = [np.asarray(o, dtype=int) for o in orders]
        self.nets = [
            MADE(store, f"{prefix}.layer{l}", dim, hidden, depth, rng) for l in range(n_layers)
        ]
        contraction = n_layers * math.log(1.0 / (1.0 + math.exp(-SIGMA_BIAS)))
        self.log_scale = store.add(f"{prefix}.log_scale", np.full(dim, -contraction))
        loc = np.zeros(dim) if loc is None else np.asarray(loc, dtype=float)
        self.shift = store.add(f"{prefix}.shift", loc)

    def graph(self, z0):
        """z0 of shape (n, dim) -> (vartheta, log q(vartheta), sigmas)."""
        log_q = ad.sum_(ad.gaussian_logpdf(z0, 0.0, 1.0), axis=-1)
        u = z0
        sigmas = []
        for order, net in zip(self.orders, self.nets):
            v = _permute(u, order)
            mu, logit = net.graph(v)
            v, log_sigma, sigma = _gate(v, mu, logit)
            sigmas.append(sigma)
            log_q = log_q - ad.sum_(log_sigma, axis=-1)
            u = _permute(v, np.argsort(order))
        vartheta = u * ad.exp(self.log_scale) + self.shift
        log_q = log_q - ad.sum_(self.log_scale)
        return vartheta, log_q, sigmas


class LocalIAFStack:
    """m local IAF layers with receptive field k over a length-N path.

    Output ``x = h(z^m * scale + shift)`` with ``h`` softplus when the state
    must stay positive, identity otherwise. ``shift`` is per dimension,
    shape (p,), or per time and dimension, shape (N, p).
    """

    def __init__(self, store, state_dim, obs_dim, n_params, m=5, k=10, hidden=20, depth=5,
                 positive=False, shift=None, scale=None, rng=None, prefix="x"):
        if m < 1 or k < 1:
            raise ValueError("m and k must be at least 1")
        rng = np.random.default_rng() if rng is None else rng
        self.p = state_dim
        self.p0 = obs_dim
        self.m = m
        self.k = k
        self.positive = positive
        in_dims = {"window": k * state_dim, "feats": 2 * k * obs_dim, "theta": n_params}
        self.nets = [
            ConditionerNet(store, f"{prefix}.layer{j}", in_dims, state_dim, hidden, depth, rng)
            for j in range(1, m + 1)
        ]
        shift = np.zeros(state_dim) if shift is None else np.asarray(shift, dtype=float)
        scale = np.ones(state_dim) if scale is None else np.asarray(scale, dtype=float)
        self.log_scale = store.add(f"{prefix}.log_scale", np.log(scale))
        self.shift = store.add(f"{prefix}.shift", shift)

    @staticmethod
    def reversed_layer(j):
        """Layers are numbered from 1; even ones see the reversed sequence."""
        return j % 2 == 0

    def graph(self, z0, vartheta, feats):
        """Build x and log q(x | vartheta).

        ``z0``: (n, N, p) standard-normal noise; ``vartheta``: (n, d) node.
        Returns a dict of nodes: ``x``, ``log_q``, ``a`` (pre-h values),
        ``log_h_prime`` and the per-layer ``sigmas``.
        """
        theta_in = ad.reshape(vartheta, (-1, 1, self.nets[0].in_dims["theta"]))
        log_q = ad.sum_(ad.sum_(ad.gaussian_logpdf(z0, 0.0, 1.0), axis=-1), axis=-1)
        u = z0
        sigmas = []
        for j, net in enumerate(self.nets, start=1):
            rev = self.reversed_layer(j)
            if rev:
                u = ad.reverse(u, axis=1)
            f_rows = ad.const(feats.rows(reverse=rev))
            mu, logit = net.graph(window=ad.window(u, self.k), feats=f_rows, theta=theta_in)
            u, log_sigma, sigma = _gate(u, mu, logit)
            log_q = log_q - ad.sum_(ad.sum_(log_sigma, axis=-1), axis=-1)
            if rev:
                u = ad.reverse(u, axis=1)
                sigma = ad.reverse(sigma, axis=1)
            sigmas.append(sigma)
        a = u * ad.exp(self.log_scale) + self.shift
        n_time = feats.forward.shape[0] - 1
        log_q = log_q - float(n_time) * ad.sum_(self.log_scale)
        if self.positive:
            x = ad.softplus(a)
            log_h_prime = ad.sum_(ad.sum_(ad.log_sigmoid(a), axis=-1), axis=-1)
            log_q = log_q - log_h_prime
        else:
            x = a
            log_h_prime = None
        return {"x": x, "log_q": log_q, "a": a, "log_h_prime": log_h_prime, "sigmas": sigmas}


# --------------------------------------------------------------------------
# plain-array evaluation


def _check_saturation(sigmas):
    for s in sigmas:
        v = s.value
        if np.any(v == 0.0) or np.any(v == 1.0):
            raise SaturationError("conditioner sigma saturated at 0 or 1")


def global_sample(flow, z0):
    """Push base noise through the global flow: returns (vartheta, log q)."""
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    vt, log_q, sigmas = flow.graph(ad.const(np.atleast_2d(z0)))
    ad.forward(ad.sum_(log_q) + ad.sum_(vt))
    _check_saturation(sigmas)
    if single:
        return vt.value[0], float(log_q.value[0])
    return vt.value, log_q.value


def local_sample(stack, z0, vartheta, feats):
    """Sample x(t_1..t_N) given vartheta: returns (x, log q(x | vartheta))."""
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 2
    z = z0[None] if single else z0
    vt = np.atleast_2d(np.asarray(vartheta, dtype=float))
    if vt.shape[0] != z.shape[0]:
        vt = np.broadcast_to(vt, (z.shape[0], vt.shape[1]))
    out = stack.graph(ad.const(z), ad.const(vt), feats)
    ad.forward(ad.sum_(out["log_q"]) + ad.sum_(out["x"]))
    _check_saturation(out["sigmas"])
    x, log_q = out["x"].value, out["log_q"].value
    if single:
        return x[0], float(log_q[0])
    return x, log_q


def conditioner_forward(net, window, feats, vartheta):
    """Evaluate one conditioner at a single grid time.

    ``window``: (k, p) previous-layer values, row ``s - 1`` holding time
    ``t - s`` (zeros for padding); ``feats``: (k, 2 p0) likewise.
    """
    inputs = {
        "window": ad.const(np.asarray(window, dtype=float).reshape(1, -1)),
        "feats": ad.const(np.asarray(feats, dtype=float).reshape(1, -1)),
        "theta": ad.const(np.asarray(vartheta, dtype=float).reshape(1, -1)),
    }
    inputs = {name: node for name, node in inputs.items() if name in net.w_in}
    mu, logit = net.graph(**inputs)
    sigma = ad.sigmoid(logit)
    root = ad.sum_(mu) + ad.sum_(sigma)
    ad.forward(root)
    return mu.value[0], sigma.value[0]


# --------------------------------------------------------------------------
# the full variational family


def _inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class Pilot:
    """Starting point for a fit: a parameter guess and the path affine."""

    vartheta: np.ndarray
    shift: np.ndarray  # (N, p), pre-h
    scale: np.ndarray  # (p,)


def _drift_path(spec, vartheta, n_time):
    """Noise-free Euler path x_{i+1} = x_i + drift(x_i) dt, or None if it blows up.

    Positive models are floored at a small value so the path stays a smooth
    function of ``vartheta``.
    """
    theta = spec.to_natural(vartheta)
    x = np.asarray(spec.x0, dtype=float).copy()
    out = np.empty((n_time, spec.state_dim))
    with np.errstate(all="ignore"):
        for i in range(n_time):
            x = x + np.array([float(v) for v in spec.drift(list(x), theta)]) * spec.dt
            if spec.positive:
                x = np.maximum(x, 1e-3)
            if not np.all(np.isfinite(x)):
                return None
            out[i] = x
    return out


def _pilot_score(spec, obs, vartheta):
    path = _drift_path(spec, vartheta, obs.n_steps)
    if path is None:
        return -np.inf, None
    theta = spec.to_natural(vartheta)
    states = np.vstack([spec.x0, path])
    idx = obs.observed_indices
    with np.errstate(all="ignore"):
        total = float(spec.prior_logpdf(vartheta))
        if idx.size:
            total += float(np.sum(obs_logpdf(spec, states[idx], obs.values[idx], theta)))
    return (total if np.isfinite(total) else -np.inf), path


def pilot_fit(spec, obs, seed=0, starts=128, refine=3):
    """Crude data-driven starting point for the variational family.

    Maximises the prior plus the observation log-likelihood of the
    noise-free drift path: a Sobol design over prior mean +- 0.8 sd, refined
    with Nelder-Mead from the best few points. Parameters that only enter
    the diffusion stay at the prior mean. The winning path gives the per-time
    shift of the path flow's output affine and the one-step Euler-Maruyama
    sd along it the per-dimension scale. If every guess breaks down, the
    shift falls back to ``x0`` and the observed data.
    """
    rng = np.random.default_rng([int(seed), 7])
    d = spec.n_params

    def loss(v):
        return -_pilot_score(spec, obs, v)[0]

    design = qmc.scale(
        qmc.Sobol(d, seed=rng).random(starts),
        spec.prior_mean - 0.8 * spec.prior_sd, spec.prior_mean + 0.8 * spec.prior_sd,
    )
    design = np.vstack([spec.prior_mean, design])
    losses = np.array([loss(v) for v in design])
    best, best_loss = spec.prior_mean.astype(float), np.inf
    for i in np.argsort(losses)[:refine]:
        if not np.isfinite(losses[i]):
            continue
        simplex = design[i] + np.vstack([np.zeros(d), 0.5 * np.eye(d)])
        res = optimize.minimize(
            loss, design[i], method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-4, "maxfev": 400 * d},
        )
        if res.fun < best_loss:
            best, best_loss = np.asarray(res.x, dtype=float), float(res.fun)

    path = _drift_path(spec, best, obs.n_steps) if np.isfinite(best_loss) else None
    if path is not None:
        _, cov = em_moments(spec, np.vstack([spec.x0, path[:-1]]), spec.to_natural(best))
        sd = np.sqrt(np.maximum(np.einsum("ii...->i...", cov), 0.0)).T
        mean = path
    else:
        mean = np.tile(np.asarray(spec.x0, dtype=float), (obs.n_steps, 1))
        sd = np.tile(np.maximum(0.1 * np.abs(mean[0]), 1.0), (obs.n_steps, 1))
        if obs.mask.any():
            y = obs.values[obs.mask]
            for j in range(spec.state_dim):
                cols = np.flatnonzero(spec.obs_matrix[j])
                if cols.size:
                    mean[:, j] = y[:, cols[0]].mean() / spec.obs_matrix[j, cols[0]]
                    sd[:, j] = y[:, cols[0]].std()
    if spec.positive:
        mean = np.maximum(mean, 1e-3)
        shift = _inverse_softplus(mean)
        # delta method through the softplus
        sd = sd * (1.0 + np.exp(-shift))
    else:
        shift = mean
    scale = np.maximum(np.sqrt(np.mean(sd**2, axis=0)), 1e-3)
    return Pilot(best, shift, scale)


class VariationalFamily:
    """q(vartheta) q(x | vartheta) for one model and dataset, in one store."""

    def __init__(self, spec, obs, m=5, k=10, hidden=20, depth=5, theta_layers=5, seed=0,
                 pilot=None, orders=None):
        self.spec = spec
        self.obs = obs
        self.arch = {
            "m": int(m),
            "k": int(k),
            "hidden": int(hidden),
            "depth": int(depth),
            "theta_layers": int(theta_layers),
            "seed": int(seed),
        }
        rng = np.random.default_rng(seed)
        self.store = ad.ParameterStore()
        self.features = build_feature_windows(obs, k)
        self.pilot = pilot_fit(spec, obs, seed) if pilot is None else pilot
        self.global_flow = GlobalFlow(
            self.store, spec.n_params, theta_layers, hidden, depth, rng, orders=orders,
            loc=self.pilot.vartheta,
        )
        shift = np.broadcast_to(self.pilot.shift, (obs.n_steps, spec.state_dim))
        self.local = LocalIAFStack(
            self.store, spec.state_dim, spec.obs_dim, spec.n_params, m, k, hidden, depth,
            positive=spec.positive, shift=shift.copy(), scale=self.pilot.scale, rng=rng,
        )

    @property
    def n_steps(self):
        return self.obs.n_steps

    def graph(self, z_theta, z_x, fixed_vartheta=None):
        """Build (vartheta, log q(vartheta), local outputs).

        With ``fixed_vartheta`` the global flow is bypassed: vartheta is a
        constant and log q(vartheta) is zero.
        """
        if fixed_vartheta is None:
            vartheta, log_q_theta, theta_sigmas = self.global_flow.graph(z_theta)
        else:
            vartheta, log_q_theta, theta_sigmas = ad.as_node(fixed_vartheta), None, []
        local = self.local.graph(z_x, vartheta, self.features)
        local["theta_sigmas"] = theta_sigmas
        return vartheta, log_q_theta, local

    def sample(self, count, rng, chunk=256):
        """Draw ``count`` joint samples; returns dict of arrays.

        Noise is drawn up front from ``rng`` and pushed through in chunks to
        bound memory.
        """
        z_theta = rng.standard_normal((count, self.spec.n_params))
        z_x = rng.standard_normal((count, self.n_steps, self.spec.state_dim))
        parts = []
        for lo in range(0, count, chunk):
            vt, log_q_theta, local = self.graph(
                ad.const(z_theta[lo : lo + chunk]), ad.const(z_x[lo : lo + chunk])
            )
            ad.forward(ad.sum_(log_q_theta) + ad.sum_(local["log_q"]) + ad.sum_(local["x"]))
            parts.append((vt.value, log_q_theta.value, local["x"].value, local["log_q"].value))
        keys = ("vartheta", "log_q_theta", "x", "log_q_x")
        return {key: np.concatenate([p[i] for p in parts]) for i, key in enumerate(keys)}

    # -- persistence ------------------------------------------------------

    def save(self, directory, stem="weights"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.store.data.astype("<f8").tofile(directory / f"{stem}.bin")
        manifest = {
            "dtype": "float64-le",
            "length": len(self.store),
            "slices": self.store.manifest(),
            "architecture": self.arch,
            "model": self.spec.name,
            "theta_orders": [o.tolist() for o in self.global_flow.orders],
        }
        (directory / f"{stem}.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return directory / f"{stem}.json"

    @classmethod
    def load(cls, manifest_path, spec, obs):
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        arch = manifest["architecture"]
        family = cls(
            spec, obs, m=arch["m"], k=arch["k"], hidden=arch["hidden"], depth=arch["depth"],
            theta_layers=arch["theta_layers"], seed=arch["seed"],
            pilot=Pilot(np.zeros(spec.n_params), np.zeros(spec.state_dim), np.ones(spec.state_dim)),
            orders=manifest["theta_orders"],
        )
        if family.store.manifest() != manifest["slices"]:
            raise ValueError("weights manifest does not match the rebuilt architecture")
        data = np.fromfile(manifest_path.with_suffix(".bin"), dtype="<f8")
        if data.size != manifest["length"]:
            raise ValueError("weights file length does not match manifest")
        family.store.data[:] = data
        return family
