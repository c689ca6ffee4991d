"""Sequential scalar kernels for the forward filter and the RWMH chain.

Both run under numba when available (see :mod:`ssmflow._accel`); the
random numbers are drawn by the caller so the compiled and interpreted
paths consume identical streams.
"""
import math

import numpy as np

from ._accel import maybe_njit

LOG_2PI = math.log(2.0 * math.pi)


@maybe_njit
def filter_loglik(y, present, decay, offset, q, obs_var, a, c):
    """Marginal log-likelihood of a scalar linear-Gaussian state-space model.

    x_{i+1} = decay * x_i + offset + N(0, q), y_i = x_i + N(0, obs_var),
    x_0 ~ N(a, c). Grid points with ``present[i] == False`` are skipped.
    """
    loglik = 0.0
    m = a
    v = c
    for i in range(y.shape[0]):
        if i > 0:
            m = decay * a + offset
            v = q + decay * decay * c
        if present[i]:
            s = v + obs_var
            r = y[i] - m
            loglik += -0.5 * (LOG_2PI + math.log(s)) - 0.5 * r * r / s
            a = m + v / s * r
            c = v * obs_var / s
        else:
            a = m
            c = v
    return loglik


@maybe_njit
def ou_coefficients(theta1, theta2, theta3, dt, exact):
    if exact:
        decay = math.exp(-theta1 * dt)
        offset = theta2 * -math.expm1(-theta1 * dt)
        if theta1 > 0.0:
            q = theta3 * theta3 / (2.0 * theta1) * -math.expm1(-2.0 * theta1 * dt)
        else:
            # theta1 underflowed to 0: Brownian limit
            q = theta3 * theta3 * dt
    else:
        decay = 1.0 - theta1 * dt
        offset = theta1 * theta2 * dt
        q = theta3 * theta3 * dt
    return decay, offset, q


@maybe_njit
def ou_log_target(vt, y, present, dt, obs_var, x0, prior_mean, prior_sd, exact):
    lp = 0.0
    for j in range(vt.shape[0]):
        z = (vt[j] - prior_mean[j]) / prior_sd[j]
        lp += -0.5 * (LOG_2PI + 2.0 * math.log(prior_sd[j])) - 0.5 * z * z
    theta1 = math.exp(vt[0])
    theta3 = math.exp(vt[2])
    decay, offset, q = ou_coefficients(theta1, vt[1], theta3, dt, exact)
    if not (q > 0.0) or not math.isfinite(q):
        return -np.inf
    return lp + filter_loglik(y, present, decay, offset, q, obs_var, x0, 0.0)


@maybe_njit
def rwmh(log_target, target_args, init, scales, noise, log_u, burn_in, adapt_every, target_rate):
    """Random-walk Metropolis with diagonal Gaussian proposals.

    ``log_target(x, *target_args)`` must itself be jittable when numba is
    on. During burn-in, every ``adapt_every`` iterations the step sizes
    become ``lam * sd`` where ``sd`` is the spread of the burn-in draws so
    far and ``lam`` is scaled multiplicatively toward ``target_rate``
    acceptance. The kernel is frozen after burn-in.
    """
    n_iter, d = noise.shape
    chain = np.empty((n_iter - burn_in, d))
    current = init.copy()
    current_lp = log_target(current, *target_args)
    step = scales.copy()
    lam = 1.0
    accepted_window = 0
    accepted = 0
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    n_seen = 0
    proposal = np.empty(d)
    for it in range(n_iter):
        for j in range(d):
            proposal[j] = current[j] + lam * step[j] * noise[it, j]
        lp = log_target(proposal, *target_args)
        if log_u[it] < lp - current_lp:
            current[:] = proposal
            current_lp = lp
            if it < burn_in:
                accepted_window += 1
            else:
                accepted += 1
        if it < burn_in:
            if it >= burn_in // 4:
                n_seen += 1
                for j in range(d):
                    s1[j] += current[j]
                    s2[j] += current[j] * current[j]
            if (it + 1) % adapt_every == 0:
                rate = accepted_window / adapt_every
                lam *= math.exp(2.0 * (rate - target_rate))
                accepted_window = 0
                if n_seen > 10 * d:
                    for j in range(d):
                        mean = s1[j] / n_seen
                        var = s2[j] / n_seen - mean * mean
                        if var > 1e-300:
                            step[j] = math.sqrt(var)
        else:
            chain[it - burn_in, :] = current
    for j in range(d):
        step[j] *= lam
    return chain, accepted, step
