import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from _oracles import (
    KinkError,
    base_logpdf,
    fd_jacobian,
    global_logq_check,
    local_logq_check,
    perturb,
    random_global_instance,
    random_local_instance,
)
from ssmflow import autodiff as ad
from ssmflow import flows
from ssmflow.models import ObservationSeries, builtin_ou, builtin_sir, simulate


def _series(n_time, mask=None, seed=0):
    values = np.random.default_rng(seed).normal(size=(n_time + 1, 1))
    mask = np.ones(n_time + 1, dtype=bool) if mask is None else mask
    return ObservationSeries(values, mask)


def _set_heads(net, mu_bias, sigma_bias):
    store = net.b_mu.attrs["store"]
    for name in ("w_mu", "w_sigma"):
        store.set(f"{net.prefix}.{name}", 0.0)
    store.set(f"{net.prefix}.b_mu", mu_bias)
    store.set(f"{net.prefix}.b_sigma", sigma_bias)


# -- feature windows -------------------------------------------------------


def test_fully_observed_series_has_all_presence_bits_inside_grid():
    feats = flows.build_feature_windows(_series(12), k=3)
    for i in range(13):
        for s in range(1, 4):
            assert feats.forward[i, s - 1, 1] == (1.0 if i - s >= 0 else 0.0)
            assert feats.backward[i, s - 1, 1] == (1.0 if i + s <= 12 else 0.0)


def test_first_window_is_entirely_padding():
    feats = flows.build_feature_windows(_series(5), k=4)
    assert np.all(feats.forward[0] == 0.0)
    assert np.all(feats.backward[-1] == 0.0)


def test_sir_stride_presence_pattern():
    spec = builtin_sir()
    _, obs = simulate(spec, [0.0022, 0.45, 5.0], seed=0)
    feats = flows.build_feature_windows(obs, k=10)
    # slot 1 at grid index j + 1 describes y_j
    presence = feats.forward[1:, 0, 1]
    expected = (np.arange(140) % 10 == 0).astype(float)
    assert np.array_equal(presence, expected)


def test_missing_values_are_zero_features():
    mask = np.array([True, False, True, False])
    feats = flows.build_feature_windows(_series(3, mask), k=3)
    assert np.all(feats.forward[2, 0] == 0.0)
    assert feats.forward[3, 1, 1] == 0.0 and feats.forward[3, 0, 1] == 1.0


def test_reversed_rows_line_up_with_backward_windows():
    feats = flows.build_feature_windows(_series(7, seed=3), k=2)
    rows = feats.rows(reverse=True)
    assert np.array_equal(rows[::-1], feats.backward[1:].reshape(7, -1))


def test_reversal_involution_is_exact():
    x = np.random.default_rng(0).normal(size=(3, 9, 2))
    node = ad.reverse(ad.reverse(ad.const(x), axis=1), axis=1)
    ad.forward(ad.sum_(node))
    assert np.array_equal(node.value, x)


# -- conditioner ------------------------------------------------------------


def _net(k=3, p=1, p0=1, d=3, seed=0):
    store = ad.ParameterStore()
    net = flows.ConditionerNet(
        store, "c", {"window": k * p, "feats": 2 * k * p0, "theta": d}, p,
        rng=np.random.default_rng(seed),
    )
    return store, net


def test_conditioner_zero_inputs_zero_weights():
    store, net = _net()
    store.data[:] = 0.0
    mu, sigma = flows.conditioner_forward(net, np.zeros((3, 1)), np.zeros((3, 2)), np.zeros(3))
    assert mu[0] == 0.0 and sigma[0] == 0.5


def test_fresh_conditioner_has_constant_heads():
    store, net = _net()
    rng = np.random.default_rng(1)
    mu, sigma = flows.conditioner_forward(
        net, rng.normal(size=(3, 1)), rng.normal(size=(3, 2)), rng.normal(size=3)
    )
    assert mu[0] == 0.0
    assert sigma[0] == pytest.approx(1 / (1 + math.exp(-2.0)))


def test_identical_windows_give_identical_outputs_across_time():
    rng = np.random.default_rng(2)
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=1, k=2, rng=rng)
    perturb(store, rng, 0.5)
    # constant values and full observation: every window past the padding matches
    obs = ObservationSeries(np.full((9, 1), 1.5), np.ones(9, dtype=bool))
    feats = flows.build_feature_windows(obs, 2)
    u = ad.const(np.full((1, 8, 1), 0.7))
    mu, logit = stack.nets[0].graph(
        window=ad.window(u, 2), feats=ad.const(feats.rows()), theta=ad.const(np.ones((1, 1, 3)))
    )
    ad.forward(ad.sum_(mu) + ad.sum_(logit))
    assert np.all(mu.value[0, 2:] == mu.value[0, 2])
    assert np.all(logit.value[0, 2:] == logit.value[0, 2])


def test_conditioner_matches_graph_evaluation():
    rng = np.random.default_rng(3)
    store, net = _net(k=2, p=2, seed=3)
    perturb(store, rng, 0.5)
    window, feats, vt = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=3)
    mu, sigma = flows.conditioner_forward(net, window, feats, vt)
    h = np.concatenate([window.ravel(), feats.ravel(), vt]) @ np.concatenate(
        [store.get("c.w_in.window"), store.get("c.w_in.feats"), store.get("c.w_in.theta")]
    ) + store.get("c.b_in")
    h = np.maximum(h, 0)
    for layer in range(1, 5):
        h = np.maximum(h @ store.get(f"c.w{layer}") + store.get(f"c.b{layer}"), 0)
    np.testing.assert_allclose(mu, h @ store.get("c.w_mu") + store.get("c.b_mu"), rtol=1e-12)
    np.testing.assert_allclose(
        sigma, 1 / (1 + np.exp(-(h @ store.get("c.w_sigma") + store.get("c.b_sigma")))), rtol=1e-12
    )


def test_perturbing_current_time_does_not_change_its_conditioner_output():
    rng = np.random.default_rng(4)
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 2, 1, 3, m=1, k=3, rng=rng)
    perturb(store, rng, 0.5)
    feats = flows.build_feature_windows(_series(6, seed=4), 3)
    z = rng.normal(size=(1, 6, 2))

    def heads(values):
        mu, logit = stack.nets[0].graph(
            window=ad.window(ad.const(values), 3), feats=ad.const(feats.rows()),
            theta=ad.const(np.zeros((1, 1, 3))),
        )
        ad.forward(ad.sum_(mu) + ad.sum_(logit))
        return mu.value.copy(), logit.value.copy()

    base = heads(z)
    for t in range(6):
        bumped = z.copy()
        bumped[0, t] += 1.0
        mu, logit = heads(bumped)
        assert np.array_equal(mu[0, : t + 1], base[0][0, : t + 1])
        assert np.array_equal(logit[0, : t + 1], base[1][0, : t + 1])


# -- local flow -------------------------------------------------------------


def test_constant_conditioner_closed_form():
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=1, k=2, rng=np.random.default_rng(0))
    b, c = 0.7, -1.3
    _set_heads(stack.nets[0], c, b)
    feats = flows.build_feature_windows(_series(5), 2)
    z0 = np.random.default_rng(5).normal(size=(5, 1))
    x, log_q = flows.local_sample(stack, z0, np.zeros(3), feats)
    s = 1 / (1 + math.exp(-b))
    np.testing.assert_allclose(x, z0 * s + c * (1 - s), rtol=1e-14, atol=1e-14)
    assert log_q == pytest.approx(base_logpdf(z0) - 5 * math.log(s), abs=1e-12)


def test_softplus_at_zero_adds_n_log_two():
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=1, k=2, positive=True, rng=np.random.default_rng(0))
    _set_heads(stack.nets[0], 0.0, 0.4)
    feats = flows.build_feature_windows(_series(6), 2)
    z0 = np.zeros((6, 1))
    x, log_q = flows.local_sample(stack, z0, np.zeros(3), feats)
    s = 1 / (1 + math.exp(-0.4))
    np.testing.assert_allclose(x, math.log(2.0))
    assert log_q == pytest.approx(base_logpdf(z0) - 6 * math.log(s) + 6 * math.log(2.0), abs=1e-12)


def test_saturated_sigma_raises():
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=1, k=2, rng=np.random.default_rng(0))
    _set_heads(stack.nets[0], 0.0, 800.0)
    feats = flows.build_feature_windows(_series(4), 2)
    with pytest.raises(flows.SaturationError):
        flows.local_sample(stack, np.zeros((4, 1)), np.zeros(3), feats)


def test_tiny_instance_jacobian_logdet():
    rng = np.random.default_rng(6)
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=2, k=2, hidden=8, depth=3, rng=rng)
    perturb(store, rng, 0.3)
    feats = flows.build_feature_windows(_series(4, seed=6), 2)
    z0, vt = rng.normal(size=(4, 1)), rng.normal(size=3)
    got, expected = local_logq_check(stack, feats, z0, vt)
    assert ad.relative_error(got, expected) < 1e-5


def test_local_logdet_on_random_instances():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        instance = random_local_instance(rng)
        try:
            got, expected = local_logq_check(*instance)
        except KinkError:
            continue
        assert ad.relative_error(got, expected) < 1e-5
        checked += 1


def _dependency_band(n_time, k, m):
    """Boolean reachability of x_i from z0_l through the layer orderings."""
    reach = np.eye(n_time, dtype=bool)
    for j in range(1, m + 1):
        layer = np.eye(n_time, dtype=bool)
        for i in range(n_time):
            for s in range(1, k + 1):
                src = i - s if j % 2 == 1 else i + s
                if 0 <= src < n_time:
                    layer[i, src] = True
        reach = (layer.astype(int) @ reach.astype(int)) > 0
    return reach


@pytest.mark.parametrize("m,k", [(1, 1), (1, 3), (2, 2), (3, 1)])
def test_triangularity_outside_receptive_fields(m, k):
    rng = np.random.default_rng(10 * m + k)
    store = ad.ParameterStore()
    n_time = 9
    stack = flows.LocalIAFStack(store, 1, 1, 3, m=m, k=k, hidden=8, depth=3, rng=rng)
    perturb(store, rng, 0.3)
    feats = flows.build_feature_windows(_series(n_time, seed=1), k)
    z0, vt = rng.normal(size=(n_time, 1)), rng.normal(size=3)
    jac = fd_jacobian(lambda z: flows.local_sample(stack, z, vt, feats)[0], z0)
    allowed = _dependency_band(n_time, k, m)
    assert np.all(jac[~allowed] == 0.0)
    if m == 1:
        # a single forward layer is lower triangular with diagonal sigma
        assert np.all(np.triu(jac, 1) == 0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50.0, 5.0))
def test_softplus_samples_are_strictly_positive(seed, shift):
    rng = np.random.default_rng(seed)
    store = ad.ParameterStore()
    stack = flows.LocalIAFStack(
        store, 2, 1, 3, m=2, k=2, hidden=8, depth=2, positive=True,
        shift=np.full(2, shift), rng=rng,
    )
    perturb(store, rng, 0.3)
    feats = flows.build_feature_windows(_series(5, seed=seed), 2)
    x, log_q = flows.local_sample(stack, rng.normal(size=(5, 2)), rng.normal(size=3), feats)
    assert np.all(x > 0) and np.isfinite(log_q)


def test_batched_sampling_matches_single_draws():
    rng = np.random.default_rng(11)
    stack, feats, _, _ = random_local_instance(rng)
    n_time, p = feats.forward.shape[0] - 1, stack.p
    z = rng.normal(size=(4, n_time, p))
    vt = rng.normal(size=(4, 3))
    xs, lqs = flows.local_sample(stack, z, vt, feats)
    for i in range(4):
        x, lq = flows.local_sample(stack, z[i], vt[i], feats)
        np.testing.assert_allclose(xs[i], x, rtol=1e-12, atol=1e-12)
        assert lqs[i] == pytest.approx(lq, rel=1e-12)


# -- global flow ------------------------------------------------------------


def test_fresh_global_flow_is_near_identity():
    rng = np.random.default_rng(12)
    flow = flows.GlobalFlow(ad.ParameterStore(), 3, rng=rng)
    for _ in range(10):
        z0 = rng.standard_normal(3)
        vt, log_q = flows.global_sample(flow, z0)
        assert np.max(np.abs(vt - z0)) < 0.1
        assert abs(log_q - base_logpdf(z0)) < 0.2


def test_single_constant_layer_is_affine():
    store = ad.ParameterStore()
    flow = flows.GlobalFlow(store, 2, n_layers=1, rng=np.random.default_rng(0))
    store.set("theta.log_scale", 0.0)
    store.set("theta.layer0.b_sigma", [0.3, -0.2])
    store.set("theta.layer0.b_mu", [1.0, 2.0])
    z0 = np.array([0.4, -1.1])
    vt, log_q = flows.global_sample(flow, z0)
    s = 1 / (1 + np.exp(-np.array([0.3, -0.2])))
    np.testing.assert_allclose(vt, s * z0 + (1 - s) * np.array([1.0, 2.0]), rtol=1e-14)
    assert log_q == pytest.approx(base_logpdf(z0) - np.log(s).sum(), abs=1e-12)


def test_global_logdet_at_dim_three():
    rng = np.random.default_rng(13)
    checked = 0
    while checked < 10:
        flow, z0 = random_global_instance(rng)
        try:
            got, expected = global_logq_check(flow, z0)
        except KinkError:
            continue
        assert ad.relative_error(got, expected) < 1e-6
        checked += 1


def test_made_layers_are_autoregressive():
    rng = np.random.default_rng(14)
    store = ad.ParameterStore()
    made = flows.MADE(store, "m", 4, hidden=12, depth=3, rng=rng)
    perturb(store, rng, 0.5)
    u = rng.normal(size=(1, 4))

    def heads(v):
        mu, logit = made.graph(ad.const(v))
        ad.forward(ad.sum_(mu) + ad.sum_(logit))
        return mu.value.copy(), logit.value.copy()

    base = heads(u)
    assert np.all(base[0][0, 0] == store.get("m.b_mu")[0])
    for j in range(4):
        bumped = u.copy()
        bumped[0, j] += 1.0
        mu, logit = heads(bumped)
        assert np.array_equal(mu[0, : j + 1], base[0][0, : j + 1])
        assert np.array_equal(logit[0, : j + 1], base[1][0, : j + 1])


def _invert_global(flow, vartheta):
    """Sequential inverse of the global flow; returns (z0, log q(vartheta))."""
    store = flow.log_scale.attrs["store"]
    u = (np.atleast_2d(vartheta) - store.get(flow.shift.attrs["name"])) / np.exp(
        store.get(flow.log_scale.attrs["name"])
    )
    log_det = np.sum(store.get(flow.log_scale.attrs["name"])) * np.ones(u.shape[0])
    for order, net in reversed(list(zip(flow.orders, flow.nets))):
        y = u[:, order]
        v = np.zeros_like(y)
        for i in range(flow.dim):
            mu, logit = net.graph(ad.const(v))
            ad.forward(ad.sum_(mu) + ad.sum_(logit))
            s = 1 / (1 + np.exp(-logit.value[:, i]))
            v[:, i] = (y[:, i] - (1 - s) * mu.value[:, i]) / s
        mu, logit = net.graph(ad.const(v))
        ad.forward(ad.sum_(mu) + ad.sum_(logit))
        log_det += np.sum(-np.logaddexp(0, -logit.value), axis=1)
        u = v[:, np.argsort(order)]
    return u, stats.norm.logpdf(u).sum(axis=1) - log_det


def test_inverse_recovers_base_noise():
    rng = np.random.default_rng(15)
    flow, z0 = random_global_instance(rng, dim=2)
    vt, log_q = flows.global_sample(flow, z0)
    back, log_q_inv = _invert_global(flow, vt)
    np.testing.assert_allclose(back[0], z0, atol=1e-10)
    assert log_q_inv[0] == pytest.approx(log_q, abs=1e-10)


def test_global_density_integrates_to_one():
    rng = np.random.default_rng(16)
    flow, _ = random_global_instance(rng, dim=2)
    samples = flows.global_sample(flow, rng.standard_normal((4000, 2)))[0]
    centre, spread = samples.mean(axis=0), 2.0 * samples.std(axis=0)
    proposal = centre + spread * rng.standard_normal((20_000, 2))
    log_g = stats.norm.logpdf(proposal, centre, spread).sum(axis=1)
    _, log_q = _invert_global(flow, proposal)
    w = np.exp(log_q - log_g)
    estimate, se = w.mean(), w.std(ddof=1) / math.sqrt(w.size)
    assert abs(estimate - 1.0) < 2 * se


# -- family and persistence -------------------------------------------------


def test_family_round_trip_through_manifest(tmp_path):
    spec = builtin_ou(n_steps=8)
    _, obs = simulate(spec, [0.2, 5.0, 1.0], "exact-ou", seed=0)
    family = flows.VariationalFamily(spec, obs, m=2, k=3, seed=4)
    perturb(family.store, np.random.default_rng(0), 0.1)
    manifest = family.save(tmp_path)
    loaded = flows.VariationalFamily.load(manifest, spec, obs)
    assert np.array_equal(loaded.store.data, family.store.data)
    a = family.sample(3, np.random.default_rng(9))
    b = loaded.sample(3, np.random.default_rng(9))
    assert all(np.array_equal(a[key], b[key]) for key in a)
    entries = {e["name"]: e for e in family.store.manifest()}
    assert entries["x.shift"]["shape"] == [8, 1]


def test_pilot_recovers_drift_parameters_from_noise_free_data():
    spec = builtin_ou(n_steps=60)
    truth = np.array([0.5, 3.0, 1.0])
    path = flows._drift_path(spec, spec.to_unconstrained(truth), 60)
    obs = ObservationSeries(np.vstack([spec.x0, path]), np.ones(61, dtype=bool))
    pilot = flows.pilot_fit(spec, obs)
    theta = spec.to_natural(pilot.vartheta)
    assert theta[0] == pytest.approx(0.5, rel=1e-2) and theta[1] == pytest.approx(3.0, rel=1e-2)
    # the diffusion does not enter the drift path, so the prior keeps it at its median
    assert theta[2] == pytest.approx(1.0, abs=1e-2)
    assert pilot.shift.shape == (60, 1)
    assert np.allclose(pilot.shift[:, 0], path[:, 0], atol=0.05)
    assert pilot.scale[0] == pytest.approx(math.sqrt(spec.dt), rel=1e-2)


def test_pilot_for_sir_is_positive_and_family_starts_there():
    spec = builtin_sir(n_steps=40, obs_stride=10)
    _, obs = simulate(spec, [0.0022, 0.45, 5.0], seed=0)
    pilot = flows.pilot_fit(spec, obs)
    assert pilot.shift.shape == (40, 2) and np.all(np.isfinite(pilot.shift))
    assert np.all(pilot.scale > 0)
    family = flows.VariationalFamily(spec, obs, m=1, k=2, hidden=4, depth=1, theta_layers=1,
                                     pilot=pilot)
    assert np.array_equal(family.store.get("theta.shift"), pilot.vartheta)
    assert np.array_equal(family.store.get("x.shift"), pilot.shift)


def test_pilot_falls_back_when_every_guess_breaks_down():
    spec = builtin_ou(n_steps=5)
    spec = replace(spec, drift=lambda x, th: [x[0] * 1e308 * 1e308])
    obs = ObservationSeries(np.full((6, 1), 3.0), np.ones(6, dtype=bool))
    pilot = flows.pilot_fit(spec, obs, starts=8)
    assert np.array_equal(pilot.vartheta, spec.prior_mean)
    assert np.allclose(pilot.shift, 3.0)
