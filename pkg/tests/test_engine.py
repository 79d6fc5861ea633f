import numpy as np
import pytest

from dbfnet.density import DensityGrid, StateGrid, l1_distance
from dbfnet.engine import (
    AgentState,
    ChannelNoise,
    SensorModel,
    StepDiagnostics,
    TargetModel,
    consensus_update,
    dbf_step,
    fuse,
    inject_channel_noise,
    multiloop_fuse,
    normalized_likelihood,
    power_estimate,
    power_rows,
    predict,
    update,
)
from dbfnet.errors import KernelInvalid, WeightRowInvalid
from dbfnet.pools import bayes_update, joint_likelihood, kl_pool
from dbfnet.topology import (
    Digraph,
    local_degree_weights,
    metropolis_weights,
    random_connected_graph,
    second_singular_value,
    sigma_m,
    AdjacencySchedule,
)


def grid_1d(lo=-6.0, hi=6.0, n=48):
    return StateGrid((lo,), (hi,), (n,))


def gaussian_sensor(sigma):
    def measure(x, rng):
        return x + sigma * rng.standard_normal(x.shape)

    def log_likelihood(y, grid):
        diff = grid.cells[:, 0] - y[0]
        return -0.5 * (diff / sigma) ** 2

    return SensorModel(measure=measure, log_likelihood=log_likelihood)


# ------------------------------------------------------------------ predict


def test_predict_identity_kernel():
    g = grid_1d()
    post = DensityGrid.gaussian(g, 1.0, [[0.5]])
    out = predict(post, TargetModel.static(g))
    assert l1_distance(out, post) <= 1e-12


def test_predict_doubly_stochastic_kernel_keeps_uniform():
    g = grid_1d(0.0, 4.0, 4)
    shift = np.roll(np.eye(4), 1, axis=1)
    k = (0.5 * np.eye(4) + 0.25 * shift + 0.25 * shift.T) / g.cell_volume
    tm = TargetModel(sample=lambda x, rng: x, kernel=k)
    out = predict(DensityGrid.uniform(g), tm)
    assert l1_distance(out, DensityGrid.uniform(g)) <= 1e-12


def test_predict_gaussian_convolution():
    g = StateGrid((-8.0,), (8.0,), (160,))
    post = DensityGrid.gaussian(g, 0.0, [[0.5]])
    out = predict(post, TargetModel.gaussian_walk(g, [[0.3]]))
    assert l1_distance(out, DensityGrid.gaussian(g, 0.0, [[0.8]])) <= 1e-9


def test_kernel_validation():
    g = grid_1d(0.0, 4.0, 4)
    with pytest.raises(KernelInvalid):
        TargetModel(sample=lambda x, rng: x, kernel=-np.eye(4))
    with pytest.raises(KernelInvalid):
        TargetModel(sample=lambda x, rng: x, kernel=np.ones((2, 3)))
    half_volume = StateGrid((0.0,), (2.0,), (4,))
    bad = TargetModel(sample=lambda x, rng: x, kernel=np.eye(4))
    with pytest.raises(KernelInvalid):
        bad.validate_rows(half_volume)


# ------------------------------------------------------------- likelihoods


def test_no_sensor_gives_uniform():
    g = grid_1d()
    out = normalized_likelihood(None, None, g)
    assert l1_distance(out, DensityGrid.uniform(g)) <= 1e-15
    out = normalized_likelihood(gaussian_sensor(1.0), None, g)
    assert l1_distance(out, DensityGrid.uniform(g)) <= 1e-15


def test_constant_evaluator_gives_uniform():
    g = grid_1d()
    sm = SensorModel(
        measure=lambda x, rng: x,
        log_likelihood=lambda y, grid: np.full(grid.n_cells, -3.7),
    )
    out = normalized_likelihood(sm, np.zeros(1), g)
    assert l1_distance(out, DensityGrid.uniform(g)) <= 1e-12


def test_gaussian_sensor_likelihood_peaks_at_observation():
    g = grid_1d()
    out = normalized_likelihood(gaussian_sensor(0.5), np.array([1.5]), g)
    peak = g.cells[np.argmax(out.values), 0]
    assert abs(peak - 1.5) <= g.widths[0]


# --------------------------------------------------------------------- fuse


def test_fuse_first_tick_is_likelihood():
    g = grid_1d()
    lik = DensityGrid.gaussian(g, 0.5, [[1.0]])
    assert fuse(lik, None, [], 1) is lik


def test_fuse_needs_history_after_first_tick():
    g = grid_1d()
    lik = DensityGrid.gaussian(g, 0.5, [[1.0]])
    with pytest.raises(ValueError):
        fuse(lik, None, [(lik, 1.0)], 2)
    with pytest.raises(ValueError):
        fuse(lik, lik, [(lik, 1.0)], 0)


def test_fuse_rejects_bad_weight_rows():
    g = grid_1d()
    lik = DensityGrid.gaussian(g, 0.0, [[1.0]])
    with pytest.raises(WeightRowInvalid):
        fuse(lik, lik, [(lik, 0.7)], 2)
    with pytest.raises(WeightRowInvalid):
        fuse(lik, lik, [(lik, 1.5), (lik, -0.5)], 2)


def test_fuse_single_agent_telescopes():
    # with A = [1] the fusion state tracks the current likelihood exactly
    g = grid_1d()
    rng = np.random.default_rng(2)
    u = None
    prev = None
    for k in range(1, 6):
        lik = DensityGrid.from_log(g, rng.uniform(-6.0, 0.0, size=g.n_cells))
        u = fuse(lik, prev, [] if k == 1 else [(u, 1.0)], k)
        assert l1_distance(u, lik) <= 1e-12
        prev = lik


def test_fuse_complete_pair_reaches_pool_in_one_exchange():
    g = grid_1d()
    l1 = DensityGrid.gaussian(g, -1.0, [[0.6]])
    l2 = DensityGrid.gaussian(g, 1.0, [[1.2]])
    pool = kl_pool([l1, l2])
    joint = joint_likelihood([l1, l2])
    for own in (l1, l2):
        u2 = fuse(own, own, [(l1, 0.5), (l2, 0.5)], 2)
        assert l1_distance(u2, pool) <= 1e-9
        assert l1_distance(power_estimate(u2, 2), joint) <= 1e-9


def test_fuse_static_likelihood_reduces_to_logop():
    g = grid_1d()
    lik = DensityGrid.gaussian(g, 0.0, [[1.0]])
    u_a = DensityGrid.gaussian(g, -2.0, [[0.5]])
    u_b = DensityGrid.gaussian(g, 2.0, [[0.8]])
    out = fuse(lik, lik, [(u_a, 0.25), (u_b, 0.75)], 3)
    from dbfnet.pools import PoolWeights, logop

    expected = logop([u_a, u_b], PoolWeights((0.25, 0.75)))
    assert l1_distance(out, expected) <= 1e-12


# ----------------------------------------------------------- power / update


def test_power_single_agent_is_identity():
    g = grid_1d()
    u = DensityGrid.gaussian(g, 0.3, [[0.9]])
    assert l1_distance(power_estimate(u, 1), u) <= 1e-15
    with pytest.raises(ValueError):
        power_estimate(u, 0)


def test_power_uniform_stays_uniform():
    g = grid_1d()
    out = power_estimate(DensityGrid.uniform(g), 7)
    assert l1_distance(out, DensityGrid.uniform(g)) <= 1e-12


def test_power_of_pool_is_joint():
    g = grid_1d()
    rng = np.random.default_rng(4)
    liks = [
        DensityGrid.from_log(g, rng.uniform(-8.0, 0.0, size=g.n_cells)) for _ in range(4)
    ]
    out = power_estimate(kl_pool(liks), 4)
    assert l1_distance(out, joint_likelihood(liks)) <= 1e-9


def test_update_matches_bayes():
    g = grid_1d()
    s = DensityGrid.gaussian(g, 0.0, [[1.0]])
    t = DensityGrid.gaussian(g, 2.0, [[1.0]])
    assert l1_distance(update(s, DensityGrid.uniform(g)), s) <= 1e-12
    assert l1_distance(update(DensityGrid.uniform(g), t), t) <= 1e-12
    assert l1_distance(update(s, t), bayes_update(s, t)) <= 1e-15
    assert l1_distance(update(s, t), DensityGrid.gaussian(g, 1.0, [[0.5]])) <= 1e-6


# ----------------------------------------------------------------- dbf_step


def run_steps(agents, schedule_matrix, k_max, tm, sms, measurement_plan):
    diags = []
    for k in range(1, k_max + 1):
        agents, d = dbf_step(agents, schedule_matrix, k, tm, sms, measurement_plan(k))
        diags.append(d)
    return agents, diags


def test_isolated_agents_exponentiate_their_own_likelihood():
    g = grid_1d()
    n = 3
    sms = [gaussian_sensor(1.0)] * n
    agents = [AgentState.initial(DensityGrid.uniform(g)) for _ in range(n)]
    ys = [np.array([-1.0]), np.array([0.5]), np.array([2.0])]
    agents, _ = dbf_step(agents, np.eye(n), 1, None, sms, ys)
    agents, _ = dbf_step(agents, np.eye(n), 2, None, sms, ys)
    for i in range(n):
        own = normalized_likelihood(sms[i], ys[i], g)
        assert l1_distance(agents[i].t, power_estimate(own, n)) <= 1e-9


def test_single_agent_run_equals_centralized_bayes():
    g = grid_1d()
    tm = TargetModel.gaussian_walk(g, [[0.2]])
    sm = gaussian_sensor(0.8)
    prior = DensityGrid.gaussian(g, 0.0, [[4.0]])
    agents = [AgentState.initial(prior)]
    reference = prior
    for k in range(1, 7):
        y = np.array([0.3 * k])
        agents, _ = dbf_step(agents, np.eye(1), k, tm, [sm], [y])
        reference = bayes_update(predict(reference, tm), normalized_likelihood(sm, y, g))
        assert l1_distance(agents[0].w, reference) <= 1e-12


def test_static_likelihoods_contract_toward_joint():
    # frozen likelihoods: disagreement between fusion states shrinks by at
    # least the window contraction rate, and the estimates reach the joint
    g = grid_1d(-4.0, 4.0, 24)
    n = 3
    a = metropolis_weights(Digraph.undirected(n, [(0, 1), (1, 2)]))
    rate = sigma_m(AdjacencySchedule.static(a))
    window = n - 1
    sms = [gaussian_sensor(1.0)] * n
    ys = [np.array([-1.5]), np.array([0.0]), np.array([1.5])]
    agents = [AgentState.initial(DensityGrid.uniform(g)) for _ in range(n)]

    def deviation(states):
        rows = np.stack([st.u.log_values - st.u.log_values[0] for st in states])
        return np.linalg.norm(rows - rows.mean(axis=0, keepdims=True))

    agents, diags = run_steps(agents, a, 1, None, sms, lambda k: ys)
    devs = [deviation(agents)]
    errs = [diags[-1].l1_to_joint.max()]
    tick = 1
    for m in range(18):
        for _ in range(window):
            tick += 1
            agents, d = dbf_step(agents, a, tick, None, sms, ys)
        devs.append(deviation(agents))
        errs.append(d.l1_to_joint.max())
    for before, after in zip(devs, devs[1:]):
        assert after <= rate * before * (1.0 + 1e-9) + 1e-12
    assert errs[-1] <= 1e-5
    assert errs[-1] < errs[0]


def test_channel_noise_identity_at_zero():
    g = grid_1d()
    u = DensityGrid.gaussian(g, 0.0, [[1.0]])
    noise = ChannelNoise.from_seed(0.0, 0.0, 9)
    assert inject_channel_noise(u, noise) is u


def test_channel_noise_bounded_log_perturbation():
    g = grid_1d()
    u = DensityGrid.gaussian(g, 0.0, [[1.0]])
    eps = 0.05
    noise = ChannelNoise.from_seed(eps, 0.0, 9)
    out = inject_channel_noise(u, noise)
    diff = out.log_values - u.log_values
    # renormalization shifts by a constant; the spread stays within 2 eps
    assert diff.max() - diff.min() <= 2 * eps
    assert diff.max() - diff.min() > 0.0
    assert abs(out.integral() - 1.0) <= 1e-9


def test_noisy_step_stays_within_budget_envelope():
    g = grid_1d()
    n = 3
    a = metropolis_weights(Digraph.undirected(n, [(0, 1), (1, 2)]))
    sms = [gaussian_sensor(1.0)] * n
    ys = [np.array([-1.0]), np.array([0.0]), np.array([1.0])]
    noise = ChannelNoise.from_seed(0.02, 0.01, 3)
    agents = [AgentState.initial(DensityGrid.uniform(g)) for _ in range(n)]
    for k in range(1, 12):
        agents, diag = dbf_step(agents, a, k, None, sms, ys, channel_noise=noise)
        for st in agents:
            assert abs(st.w.integral() - 1.0) <= 1e-9
    assert np.all(np.isfinite(diag.l1_to_joint))


def test_step_diagnostics_deterministic():
    g = grid_1d()
    n = 2
    a = local_degree_weights(Digraph.undirected(n, [(0, 1)]))
    sms = [gaussian_sensor(1.0)] * n

    def once():
        noise = ChannelNoise.from_seed(0.01, 0.01, 7)
        agents = [AgentState.initial(DensityGrid.uniform(g)) for _ in range(n)]
        out = []
        for k in range(1, 5):
            ys = [np.array([0.2 * k]), np.array([-0.1 * k])]
            agents, d = dbf_step(agents, a, k, None, sms, ys, channel_noise=noise)
            out.append(d.l1_to_joint.copy())
        return np.stack(out)

    np.testing.assert_array_equal(once(), once())


# ---------------------------------------------------------------- multiloop


def test_multiloop_first_loop_is_own_likelihood():
    g = grid_1d()
    liks = [DensityGrid.gaussian(g, m, [[1.0]]) for m in (-1.0, 0.0, 1.0)]
    a = metropolis_weights(Digraph.undirected(3, [(0, 1), (1, 2)]))
    res = multiloop_fuse(liks, a, 1)
    for u, lik in zip(res.fusion, liks):
        assert l1_distance(u, lik) <= 1e-15
    with pytest.raises(ValueError):
        multiloop_fuse(liks, a, 0)


def test_multiloop_complete_graph_two_loops_exact():
    g = grid_1d()
    n = 4
    liks = [DensityGrid.gaussian(g, m, [[0.8]]) for m in (-1.5, -0.5, 0.5, 1.5)]
    a = np.full((n, n), 1.0 / n)
    res = multiloop_fuse(liks, a, 2)
    joint = joint_likelihood(liks)
    for t in res.estimates:
        assert l1_distance(t, joint) <= 1e-9
    assert res.error_norms[-1] <= 1e-9


def test_multiloop_errors_within_spectral_bound():
    rng = np.random.default_rng(13)
    g = grid_1d(-4.0, 4.0, 24)
    for _ in range(5):
        n = int(rng.integers(3, 6))
        a = metropolis_weights(random_connected_graph(n, rng))
        sigma_a = second_singular_value(a)
        liks = [
            DensityGrid.gaussian(g, float(rng.uniform(-2, 2)), [[float(rng.uniform(0.3, 2.0))]])
            for _ in range(n)
        ]
        res = multiloop_fuse(liks, a, 6)
        for loop, err in enumerate(res.error_norms, start=1):
            assert err <= sigma_a ** (loop - 1) * 2.0 * np.sqrt(n) + 1e-9


# ------------------------------------------------------------- stacked form


def test_consensus_update_matches_per_agent_fuse():
    g = grid_1d(-4.0, 4.0, 24)
    n = 3
    rng = np.random.default_rng(21)
    a = metropolis_weights(Digraph.undirected(n, [(0, 1), (1, 2)]))
    u_prev = [DensityGrid.from_log(g, rng.uniform(-6, 0, g.n_cells)) for _ in range(n)]
    l_prev = [DensityGrid.from_log(g, rng.uniform(-6, 0, g.n_cells)) for _ in range(n)]
    l_cur = [DensityGrid.from_log(g, rng.uniform(-6, 0, g.n_cells)) for _ in range(n)]
    stacked = consensus_update(
        np.stack([u.log_values for u in u_prev]),
        np.stack([l.log_values for l in l_cur]),
        np.stack([l.log_values for l in l_prev]),
        a.values,
        g.cell_volume,
    )
    for i in range(n):
        received = [(u_prev[j], float(a.values[i, j])) for j in range(n) if a.values[i, j] > 0]
        expected = fuse(l_cur[i], l_prev[i], received, 2)
        np.testing.assert_allclose(stacked[i], expected.log_values, atol=1e-9)


def test_consensus_update_first_tick_normalizes_likelihoods():
    g = grid_1d(-4.0, 4.0, 24)
    rng = np.random.default_rng(22)
    raw = rng.uniform(-6, 0, (2, g.n_cells))
    out = consensus_update(np.zeros_like(raw), raw, None, np.eye(2), g.cell_volume)
    for i in range(2):
        expected = DensityGrid.from_log(g, raw[i])
        np.testing.assert_allclose(out[i], expected.log_values, atol=1e-12)


def test_power_rows_matches_power_estimate():
    g = grid_1d(-4.0, 4.0, 24)
    rng = np.random.default_rng(23)
    u = [DensityGrid.from_log(g, rng.uniform(-6, 0, g.n_cells)) for _ in range(3)]
    rows = power_rows(np.stack([x.log_values for x in u]), 3, g.cell_volume)
    for i in range(3):
        np.testing.assert_allclose(rows[i], power_estimate(u[i], 3).log_values, atol=1e-9)
