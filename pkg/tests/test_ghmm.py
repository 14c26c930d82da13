import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import emissions, toy_model
from oracles import enum_em_step, enum_loglik
from pedghmm.ghmm import (GoalSet, LearningConfig, ModelError, NumericalUnderflowError, ObservationSequence,
                          apply_topology_delta, dump_model_text, incremental_baum_welch,
                          init_model_from_topology, load_model, make_baseline, model_from_bytes,
                          model_to_bytes, observation_likelihood, save_model, sequence_loglik,
                          transition_seed, update_goals)
from pedghmm.scene import PotentialCostMap, sample_cost
from pedghmm.topology import (StaleDeltaError, TopologicalMap, TopologyDelta, apply_delta,
                              build_prior_topology, itm_update)


def uniform_map(value=0.3, size=10.0):
    n = int(size)
    return PotentialCostMap((0.0, 0.0), 1.0, n, n, np.full(n * n, value))


def line_topo(points, edges=(), pinned=(0,), tau=1.0):
    t = TopologicalMap(tau, 0.05, bounds=(0.0, 0.0, 10.0, 10.0))
    for k, p in enumerate(points):
        t.add_node(p, pinned=k in pinned)
    for a, b in edges:
        t.add_edge(a, b)
    return t


# -- seeds ------------------------------------------------------------------------

def test_seed_examples():
    assert transition_seed(0.1, 0.9, False, 0.05) == 0.8
    assert transition_seed(0.5, 0.5, False, 0.05) == 0.5
    assert transition_seed(0.9, 0.1, False, 0.05) == 0.2
    assert transition_seed(0.3, 0.7, True, 0.05) == 0.05


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.booleans(), st.floats(1e-4, 0.5))
def test_seed_cases(alpha, beta, is_self, eps):
    w = transition_seed(alpha, beta, is_self, eps)
    assert w in (0.8, 0.5, 0.2, 0.05)
    if is_self:
        assert w == 0.05
    elif beta - alpha > eps:
        assert w == 0.8
    elif beta - alpha < -eps:
        assert w == 0.2
    else:
        assert w == 0.5


# -- initialisation ----------------------------------------------------------------

def test_single_state():
    t = line_topo([(5.0, 5.0)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig())
    assert m.n_states == 1
    assert m.prior.tolist() == [1.0]
    assert m.transition_matrix().tolist() == [[1.0]]


def test_equal_cost_pair_row():
    t = line_topo([(2.0, 2.0), (4.0, 2.0)], [(0, 1)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig())
    A = m.transition_matrix()
    np.testing.assert_allclose(A[0], [0.05 / 0.55, 0.5 / 0.55], rtol=0, atol=1e-15)
    assert A[0, 0] == pytest.approx(0.0909090909, abs=1e-10)


def test_sidewalk_prior_beats_road(crossing):
    _, cmap, dests = crossing
    t = build_prior_topology(cmap, dests, 2.0)
    m = init_model_from_topology(t, cmap, GoalSet.from_topology(t), LearningConfig())
    by_node = {n: m.prior[k] for k, (n, g) in enumerate(m.states) if g == 0}
    walk = min(t.nodes, key=lambda n: math.dist(t.nodes[n].centroid, (10.0, 4.0)))
    road = min(t.nodes, key=lambda n: math.dist(t.nodes[n].centroid, (10.0, 10.0)))
    assert sample_cost(cmap, t.nodes[walk].centroid) < sample_cost(cmap, t.nodes[road].centroid)
    assert by_node[walk] > by_node[road]


def test_prior_is_one_minus_cost(crossing):
    _, cmap, dests = crossing
    t = build_prior_topology(cmap, dests, 4.0)
    m = init_model_from_topology(t, cmap, GoalSet.from_topology(t), LearningConfig())
    raw = np.array([1 - sample_cost(cmap, t.nodes[n].centroid) for n, _ in m.states])
    np.testing.assert_allclose(m.prior, raw / raw.sum(), rtol=1e-12)


def test_node_outside_map():
    t = line_topo([(5.0, 5.0), (9.5, 9.5)], [(0, 1)])
    with pytest.raises(ModelError, match="outside"):
        init_model_from_topology(t, uniform_map(size=8.0), GoalSet.from_topology(t), LearningConfig())


def test_empty_goals():
    t = line_topo([(5.0, 5.0)], pinned=())
    with pytest.raises(ModelError, match="goal"):
        init_model_from_topology(t, uniform_map(), GoalSet(), LearningConfig())


def test_baseline_uniform_and_same_states(crossing):
    _, cmap, dests = crossing
    t = build_prior_topology(cmap, dests, 4.0)
    goals = GoalSet.from_topology(t)
    b = make_baseline(t, goals, pi0=0.37, a0=0.9)
    m = init_model_from_topology(t, cmap, goals, LearningConfig())
    assert b.states == m.states
    np.testing.assert_allclose(b.prior, 1 / b.n_states, rtol=1e-12)
    A = b.transition_matrix()
    for row in A:
        nz = row[row > 0]
        np.testing.assert_allclose(nz, 1 / len(nz), rtol=1e-12)


def test_config_validation():
    for bad in (dict(epsilon=0), dict(sigma_obs=-1), dict(bw_learning_rate=0), dict(bw_learning_rate=1.5)):
        with pytest.raises(ModelError):
            LearningConfig(**bad)


# -- structure updates -------------------------------------------------------------

def grid_model(cmap=None, tau=2.5):
    cmap = cmap or uniform_map(size=10.0)
    t = build_prior_topology(cmap, [(1.0, 1.0), (9.0, 9.0)], tau)
    return t, init_model_from_topology(t, cmap, GoalSet.from_topology(t), LearningConfig()), cmap


def test_empty_delta_bit_identical():
    t, m, cmap = grid_model()
    before = model_to_bytes(m)
    apply_topology_delta(m, TopologyDelta(), cmap)
    apply_topology_delta(m, TopologyDelta(counters=[(0, 5, 3)], run=(0, 3), winner=0), cmap)
    assert model_to_bytes(m) == before


def test_node_removal_drops_goal_count_states():
    t, m, cmap = grid_model()
    victim = next(n for n in sorted(t.nodes) if n not in t.pinned)
    d = TopologyDelta(nodes_removed=[victim],
                      edges_removed=sorted(tuple(sorted((victim, k))) for k in t.adjacency[victim]))
    n0 = m.n_states
    apply_topology_delta(m, d, cmap)
    assert m.n_states == n0 - len(m.goals)
    m.check_invariants()


def test_goal_node_removal_is_stale():
    t, m, cmap = grid_model()
    goal = next(iter(t.pinned))
    with pytest.raises(StaleDeltaError):
        apply_topology_delta(m, TopologyDelta(nodes_removed=[goal]), cmap)


def test_unknown_node_is_stale():
    t, m, cmap = grid_model()
    with pytest.raises(StaleDeltaError):
        apply_topology_delta(m, TopologyDelta(edges_removed=[(0, 999)]), cmap)


def ramp(width=10):
    """Cost rising along x from 0.1 to 1."""
    vals = np.tile(np.linspace(0.1, 1.0, width), width)
    return PotentialCostMap((0.0, 0.0), 1.0, width, width, vals)


def test_moved_node_reseeds_only_unlearned():
    cmap = ramp()
    t = line_topo([(1.5, 5.0), (4.5, 5.0), (7.5, 5.0)], [(0, 1), (1, 2)])
    m = init_model_from_topology(t, cmap, GoalSet.from_topology(t), LearningConfig())
    assert m.trans_w[(1, 0)][2] == 0.2  # uphill
    m.learned[(1, 0)].add(0)
    m.trans_w[(1, 0)][0] = 0.123
    # slide node 1 to the right so node 2 is no longer clearly uphill of it
    d = TopologyDelta(nodes_moved=[(1, (4.5, 5.0), (7.4, 5.2))])
    apply_topology_delta(m, d, cmap)
    assert m.trans_w[(1, 0)][0] == 0.123
    assert m.trans_w[(1, 0)][2] == 0.5
    assert m.node_pos[1] == (7.4, 5.2)
    m.check_invariants()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_deltas_keep_invariants(seed):
    rng = np.random.default_rng(seed)
    t, m, cmap = grid_model(ramp())
    for _ in range(150):
        d = itm_update(t, rng.uniform(0, 10, 2))
        apply_delta(t, d)
        apply_topology_delta(m, d, cmap)
        m.check_invariants()
    assert sorted(m.node_pos) == sorted(t.nodes)
    assert {n: m.adjacency[n] for n in m.adjacency} == t.adjacency


# -- goals ----------------------------------------------------------------------------

def test_no_goal_update_without_dwell():
    t, m, cmap = grid_model()
    before = model_to_bytes(m)
    update_goals(m, t)
    assert model_to_bytes(m) == before


def test_new_goal_adds_one_state_per_node():
    t, m, cmap = grid_model()
    node = next(n for n in sorted(t.nodes) if n not in t.pinned
                and min(math.dist(t.nodes[n].centroid, g.point) for g in m.goals.goals.values()) > 3)
    t.nodes[node].dwell_accumulator = m.config.dwell_threshold
    n0 = m.n_states
    update_goals(m, t)
    assert m.n_states == n0 + len(t.nodes)
    assert node in t.pinned
    m.check_invariants()


def test_dwell_on_existing_goal_no_duplicate():
    t, m, cmap = grid_model()
    goal_node = next(iter(t.pinned))
    t.nodes[goal_node].dwell_accumulator = 10**6
    n_goals = len(m.goals)
    update_goals(m, t)
    assert len(m.goals) == n_goals


# -- observation model ---------------------------------------------------------------

def test_density_peak_and_one_sigma():
    t = line_topo([(5.0, 5.0)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig(sigma_obs=1.0))
    assert observation_likelihood(m, 0, (5.0, 5.0)) == pytest.approx(1 / (2 * math.pi), rel=1e-15)
    assert observation_likelihood(m, 0, (6.0, 5.0)) == pytest.approx(math.exp(-0.5) / (2 * math.pi), rel=1e-15)


def test_density_integrates_to_one():
    t = line_topo([(5.0, 5.0)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig(sigma_obs=0.7))
    xs = np.linspace(0.0, 10.0, 401)
    h = xs[1] - xs[0]
    grid = np.array([[observation_likelihood(m, 0, (x, y)) for x in xs] for y in xs])
    w = np.full(len(xs), h)
    w[0] = w[-1] = h / 2
    assert abs(w @ grid @ w - 1.0) < 1e-3


def test_density_ignores_goal():
    rng = np.random.default_rng(0)
    m = toy_model(rng, 3, 3)
    for node in range(3):
        idx = [k for k, (n, _) in enumerate(m.states) if n == node]
        vals = {observation_likelihood(m, k, (4.0, 6.0)) for k in idx}
        assert len(vals) == 1


# -- likelihood -------------------------------------------------------------------------

def test_loglik_first_step():
    rng = np.random.default_rng(1)
    m = toy_model(rng, 3, 1)
    o = np.array([[4.0, 4.0]])
    B = emissions(m, o)
    assert sequence_loglik(m, o) == pytest.approx(math.log(m.prior @ B[0]), rel=1e-12)


def test_loglik_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = toy_model(rng, 3, 1)
        o = rng.uniform(0, 10, (4, 2))
        ref = enum_loglik(m.prior, m.transition_matrix(), emissions(m, o))
        assert sequence_loglik(m, o) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_loglik_truncation_monotone(seed, T):
    rng = np.random.default_rng(seed)
    m = toy_model(rng, 4, 2, sigma=1.5)
    assert 1 / (2 * math.pi * 1.5 ** 2) < 1  # densities below 1, so each step can only shrink
    o = rng.uniform(0, 10, (T, 2))
    assert sequence_loglik(m, o) <= sequence_loglik(m, o[:-1])


def test_loglik_impossible_sequence():
    t = line_topo([(1.0, 1.0), (9.0, 9.0)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig(sigma_obs=0.01))
    o = [(1.0, 1.0), (9.0, 9.0)]
    assert sequence_loglik(m, o) == -math.inf
    with pytest.raises(NumericalUnderflowError):
        incremental_baum_welch(m, o)


# -- Baum-Welch ----------------------------------------------------------------------

def test_rate_zero_is_identity():
    rng = np.random.default_rng(3)
    m = toy_model(rng, 4, 2)
    before = model_to_bytes(m)
    incremental_baum_welch(m, rng.uniform(0, 10, (5, 2)), learning_rate=0.0)
    assert model_to_bytes(m) == before


def test_rate_one_is_batch_em():
    rng = np.random.default_rng(4)
    for _ in range(60):
        n_nodes = int(rng.integers(1, 5))
        m = toy_model(rng, n_nodes, 1, sigma=2.0)
        o = rng.uniform(1, 9, (int(rng.integers(2, 6)), 2))
        pi_ref, A_ref = enum_em_step(m.prior, m.transition_matrix(), emissions(m, o))
        incremental_baum_welch(m, o, learning_rate=1.0)
        np.testing.assert_allclose(m.prior, pi_ref, atol=1e-9, rtol=0)
        np.testing.assert_allclose(m.transition_matrix(), A_ref, atol=1e-9, rtol=0)


def test_two_state_blend_by_hand():
    t = line_topo([(3.0, 5.0), (6.0, 5.0)], [(0, 1)])
    m = init_model_from_topology(t, uniform_map(), GoalSet.from_topology(t), LearningConfig(sigma_obs=2.0))
    pi, A = m.prior.copy(), m.transition_matrix()
    o = [(3.5, 5.0), (5.5, 5.0)]
    b = [[math.exp(-((x - c) ** 2) / 8) for c in (3.0, 6.0)] for x, _ in o]
    # forward-backward for T = 2 written out
    joint = np.array([[pi[i] * b[0][i] * A[i, j] * b[1][j] for j in range(2)] for i in range(2)])
    xi = joint / joint.sum()
    gamma1 = xi.sum(axis=1)
    r, k = 0.3, m.config.bw_prior_weight
    pi_new = (1 - r) * pi + r * gamma1
    A_new = ((1 - r) * k * A + r * xi) / ((1 - r) * k + r * gamma1)[:, None]
    incremental_baum_welch(m, o, learning_rate=r)
    np.testing.assert_allclose(m.prior, pi_new, atol=1e-14)
    np.testing.assert_allclose(m.transition_matrix(), A_new, atol=1e-14)


def test_sparsity_survives_learning():
    rng = np.random.default_rng(5)
    m = toy_model(rng, 4, 2, edge_p=0.4)
    mask = m.transition_matrix() > 0
    for _ in range(10):
        incremental_baum_welch(m, rng.uniform(1, 9, (6, 2)), learning_rate=0.8)
        m.check_invariants()
        assert not np.any((m.transition_matrix() > 0) & ~mask)


def test_bw_rejects_bad_input():
    rng = np.random.default_rng(6)
    m = toy_model(rng, 3, 1)
    with pytest.raises(ModelError, match="at least 2"):
        incremental_baum_welch(m, [(5.0, 5.0)])
    with pytest.raises(ModelError, match="outside"):
        incremental_baum_welch(m, [(5.0, 5.0), (50.0, 5.0)])


def test_goal_conditioned_sequence_touches_one_goal():
    rng = np.random.default_rng(7)
    m = toy_model(rng, 4, 2)
    A0 = m.transition_matrix()
    g_other = sorted(m.goals.goals)[1]
    incremental_baum_welch(m, ObservationSequence(rng.uniform(1, 9, (5, 2)), sorted(m.goals.goals)[0]),
                           learning_rate=1.0)
    rows = [k for k, (_, g) in enumerate(m.states) if g == g_other]
    np.testing.assert_array_equal(m.transition_matrix()[rows], A0[rows])


# -- persistence --------------------------------------------------------------------

def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    t, m, cmap = grid_model(ramp())
    for _ in range(200):
        d = itm_update(t, rng.uniform(0, 10, 2))
        apply_delta(t, d)
        apply_topology_delta(m, d, cmap)
    incremental_baum_welch(m, rng.uniform(0, 10, (6, 2)))
    m.topology_id = t.snapshot_id()
    save_model(m, tmp_path / "m.ghmm")
    back = load_model(tmp_path / "m.ghmm")
    assert model_to_bytes(back) == model_to_bytes(m)
    assert dump_model_text(back) == dump_model_text(m)
    assert back.topology_id == t.snapshot_id()
    np.testing.assert_array_equal(back.prior, m.prior)


def test_bad_model_file(tmp_path):
    with pytest.raises(ModelError, match="magic"):
        model_from_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ModelError, match="cannot read"):
        load_model(tmp_path / "missing.ghmm")


def test_invariant_checker_catches_cross_goal_transition():
    rng = np.random.default_rng(9)
    m = toy_model(rng, 2, 2)
    # a transition into a state that lacks an edge must be flagged
    m.adjacency[0].discard(1)
    m.adjacency[1].discard(0)
    m.trans_w[(0, sorted(m.goals.goals)[0])][1] = 0.5
    m.invalidate()
    with pytest.raises(ModelError, match="sparsity"):
        m.check_invariants()
