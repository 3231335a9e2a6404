import numpy as np
import pytest
from scipy.optimize import least_squares

from conftest import make_network
from gsticp.config import EauParams, ScenarioConfig
from gsticp.models import Belief3, MobilityParams, NodeKind, NodeState
from gsticp.netsim import (AGENT_BROADCAST_SCALARS, PRIOR_VARIANCE_FLOOR, AgentStatus, Counters, EauDecision,
                           EauState, LinkSet, Network, SeedPlan, SlotState, Stream, _temporal, broadcast,
                           classify_and_filter, collect_measurements, discover_neighbors, eau_classify,
                           prune_pseudo_anchor_links, run_iteration, run_time_slot)
from gsticp.scene import Box3, Scene, build_index

AREA = Box3((-500.0, -500.0, -100.0), (500.0, 500.0, 200.0))


def cfg(**kw):
    base = dict(area=AREA, n_slots=1, l_max=20, noise_std=1.0, mobility=MobilityParams(0.0, 0.0))
    base.update(kw)
    return ScenarioConfig(**base).validate()


def prepare(net, config, seed=0, deterministic=True):
    """Slot state as the slot driver builds it, before the iteration loop."""
    links = collect_measurements(net, config, SeedPlan(seed), 0, deterministic=deterministic)
    mean, var = net.beliefs()
    anchor = net.is_anchor
    var0 = var.copy()
    var0[anchor] = 0.0
    t_var = np.maximum(var, PRIOR_VARIANCE_FLOOR)
    state = SlotState(mean.copy(), var0, mean.copy(), t_var, anchor, EauState.fresh(mean))
    return state, links


def links_of(pairs, n_true_nlos=None):
    src = np.array([p[0] for p in pairs], dtype=int)
    dst = np.array([p[1] for p in pairs], dtype=int)
    nlos = np.zeros(len(pairs), bool) if n_true_nlos is None else np.asarray(n_true_nlos)
    return LinkSet(src, dst, np.ones(len(pairs)), np.ones(len(pairs)), nlos)


# --- topology ----------------------------------------------------------------

def test_isolated_node_has_no_neighbors():
    net = make_network([[0, 0, 0]], [[500, 0, 0]], comm_range=100.0)
    assert discover_neighbors(net, 1) == ([], [])


def test_neighbor_at_exact_range_is_included():
    net = make_network([[0, 0, 0]], [[300, 0, 0]], comm_range=300.0)
    assert discover_neighbors(net, 1) == ([0], [])
    assert discover_neighbors(net, 0) == ([], [1])


def test_neighbors_match_brute_force():
    rng = np.random.default_rng(3)
    pos = rng.uniform(0, 800, (30, 3))
    net = make_network(pos[:10], pos[10:], comm_range=300.0)
    for i in range(30):
        anchors, agents = discover_neighbors(net, i)
        near = [j for j in range(30) if j != i and np.sqrt(np.sum((pos[i] - pos[j]) ** 2)) <= 300.0]
        assert anchors == [j for j in near if j < 10]
        assert agents == [j for j in near if j >= 10]


def test_network_rejects_duplicates_and_bad_range():
    node = NodeState(0, NodeKind.ANCHOR, (0, 0, 0), Belief3.point((0, 0, 0)))
    with pytest.raises(ValueError):
        Network([node, node], 10.0)
    with pytest.raises(ValueError):
        Network([node], 0.0)


def test_only_agents_receive_measurements():
    net = make_network([[0, 0, 0], [10, 0, 0]], [[0, 10, 0]], comm_range=100.0)
    links = collect_measurements(net, cfg(), SeedPlan(0), 0)
    assert set(links.dst.tolist()) == {2}
    assert sorted(links.src.tolist()) == [0, 1]


# --- NLOS filtering ----------------------------------------------------------

WALL = Scene(bounds=AREA, buildings=(Box3((40, -50, 0), (60, 50, 50)),))


def test_empty_scene_removes_nothing():
    links = links_of([(0, 1), (1, 0)])
    est = np.array([[0.0, 0, 10], [100, 0, 10]])
    kept, n = classify_and_filter(links, build_index(Scene(AREA, ())), est)
    assert n == 0 and len(kept) == 2
    kept, n = classify_and_filter(links, None, est)
    assert n == 0 and len(kept) == 2


def test_oracle_mode_uses_true_labels():
    links = links_of([(0, 1), (2, 1)], [True, False])
    est = np.zeros((3, 3))   # estimates would call everything LOS
    kept, n = classify_and_filter(links, build_index(WALL), est, oracle_mode=True)
    assert n == 1 and kept.src.tolist() == [2]


def test_truth_estimates_reproduce_oracle_filter():
    rng = np.random.default_rng(8)
    pos = rng.uniform(-100, 200, (40, 3))
    pos[:, 2] = rng.uniform(0, 60, 40)
    index = build_index(WALL)
    src, dst = np.nonzero(~np.eye(40, dtype=bool))
    true_nlos = index.segments_blocked(pos[src], pos[dst])
    links = LinkSet(src, dst, np.ones(len(src)), np.ones(len(src)), true_nlos)
    assert true_nlos.any() and not true_nlos.all()
    est_kept, _ = classify_and_filter(links, index, pos)
    orc_kept, _ = classify_and_filter(links, index, pos, oracle_mode=True)
    assert est_kept.src.tolist() == orc_kept.src.tolist()
    assert est_kept.dst.tolist() == orc_kept.dst.tolist()
    again, n = classify_and_filter(est_kept, index, pos)
    assert n == 0 and again.src.tolist() == est_kept.src.tolist()


def test_filter_is_idempotent_with_noisy_estimates():
    rng = np.random.default_rng(9)
    pos = rng.uniform(-100, 200, (25, 3))
    est = pos + rng.normal(0, 15, pos.shape)
    index = build_index(WALL)
    src, dst = np.nonzero(~np.eye(25, dtype=bool))
    links = LinkSet(src, dst, np.ones(len(src)), np.ones(len(src)), index.segments_blocked(pos[src], pos[dst]))
    once, _ = classify_and_filter(links, index, est)
    twice, n = classify_and_filter(once, index, est)
    assert n == 0 and np.array_equal(once.src, twice.src) and np.array_equal(once.dst, twice.dst)


# --- EAU ---------------------------------------------------------------------

@pytest.mark.parametrize("delta,expected", [
    ((0.05, 0, 0), EauDecision.UPGRADE),
    ((0.3, 0.1, 0), EauDecision.SKIP_NEXT),
    ((0.8, 0, 0), EauDecision.CONTINUE),
    ((0, 0, -0.6), EauDecision.CONTINUE),
])
def test_eau_classify_examples(delta, expected):
    p = EauParams(0.1, 0.5, True)
    assert eau_classify((1, 1, 1), np.add((1, 1, 1), delta), p) == expected


def test_prune_examples():
    is_anchor = np.array([True, False, False, False])
    links = links_of([(0, 1), (1, 2), (2, 1), (3, 1), (1, 3), (0, 3)])
    status = np.zeros(4, dtype=np.int8)
    kept, n = prune_pseudo_anchor_links(links, status, is_anchor)
    assert n == 0 and len(kept) == 6
    status[[1, 2]] = AgentStatus.PSEUDO_ANCHOR
    kept, n = prune_pseudo_anchor_links(links, status, is_anchor)
    pairs = list(zip(kept.src.tolist(), kept.dst.tolist()))
    assert n == 3
    assert pairs == [(3, 1), (1, 3), (0, 3)]   # pseudo <-> active kept


# --- broadcast ---------------------------------------------------------------

def test_broadcast_scalar_counts():
    agent = NodeState(1, NodeKind.AGENT, (0, 0, 0), Belief3((1, 2, 3), (1, 1, 1)))
    anchor = NodeState(0, NodeKind.ANCHOR, (4, 5, 6), Belief3.point((4, 5, 6)))
    payload, n = broadcast(agent)
    assert n == 6 and payload == (1.0, 2.0, 3.0, 1.0, 1.0, 1.0)
    assert broadcast(anchor) == ((4.0, 5.0, 6.0), 3)
    assert broadcast(agent, pseudo=True)[1] == 3


@pytest.mark.parametrize("n_anchors", [1, 4, 8])
def test_scalars_broadcast_per_node_not_per_link(tetra_anchors, n_anchors):
    anchors = np.vstack([tetra_anchors, tetra_anchors + 7.0])[:n_anchors]
    net = make_network(anchors, [[30, 40, 10]])
    res = run_time_slot(net, cfg(l_max=20), SeedPlan(1))
    assert res.counters.scalars_broadcast == 20 * AGENT_BROADCAST_SCALARS
    assert res.counters.anchor_scalars_broadcast == 20 * 3 * n_anchors


def test_scalars_counter_independent_of_density():
    rng = np.random.default_rng(2)
    pos = rng.uniform(0, 400, (18, 3))
    counts = []
    for r in (80.0, 200.0, 1000.0):
        net = make_network(pos[:6], pos[6:], comm_range=r)
        counts.append(run_time_slot(net, cfg(l_max=7, comm_range=r), SeedPlan(1)).counters.scalars_broadcast)
    assert counts == [12 * 7 * 6] * 3


# --- iterations --------------------------------------------------------------

def test_agent_without_neighbors_keeps_temporal_message():
    net = make_network([[0, 0, 0]], [[400, 0, 0]], priors=[[405, 3, -2]], comm_range=50.0)
    config = cfg(comm_range=50.0)
    state, links = prepare(net, config)
    assert len(links) == 0
    t_mean, t_var = state.t_mean.copy(), state.t_var.copy()
    for l in range(1, 6):
        links = run_iteration(state, links, config, l)
        np.testing.assert_array_equal(state.mean[1], t_mean[1])
        np.testing.assert_array_equal(state.var[1], t_var[1])


def test_all_pseudo_iteration_is_noop(tetra_anchors):
    net = make_network(tetra_anchors, [[30, 40, 10], [60, 50, 20]], priors=[[35, 40, 10], [60, 45, 25]])
    config = cfg(eau=EauParams(0.05, 0.5, True))
    state, links = prepare(net, config)
    state.eau.status[~state.is_anchor] = AgentStatus.PSEUDO_ANCHOR
    before = state.mean.copy(), state.var.copy()
    links = run_iteration(state, links, config, 1)
    assert state.counters.belief_updates == 0
    assert state.counters.spatial_messages == 0
    assert np.array_equal(state.mean, before[0]) and np.array_equal(state.var, before[1])
    assert len(links) == 0    # every link touches an anchor or another pseudo-anchor


def test_two_agents_match_least_squares_oracle(tetra_anchors):
    truth = np.array([[30.0, 40.0, 10.0], [70.0, 60.0, 25.0]])
    priors = truth + np.array([[6.0, -4.0, 5.0], [-5.0, 7.0, -6.0]])
    net = make_network(tetra_anchors, truth, priors=priors, prior_std=10.0)
    config = cfg(l_max=20, noise_std=0.1)
    res = run_time_slot(net, config, SeedPlan(0), deterministic=True)

    pos = np.vstack([tetra_anchors, truth])
    links = collect_measurements(make_network(tetra_anchors, truth), config, SeedPlan(0), 0, deterministic=True)

    def residuals(x):
        p = pos.copy()
        p[4:] = x.reshape(2, 3)
        return np.linalg.norm(p[links.src] - p[links.dst], axis=1) - links.z

    oracle = least_squares(residuals, priors.ravel(), xtol=1e-14, ftol=1e-14, gtol=1e-14).x.reshape(2, 3)
    assert np.all(np.linalg.norm(oracle - truth, axis=1) < 1e-6)
    assert np.all(np.linalg.norm(res.estimates - oracle, axis=1) < 0.1)


def test_belief_updates_count_without_eau():
    rng = np.random.default_rng(5)
    pos = rng.uniform(0, 300, (14, 3))
    net = make_network(pos[:5], pos[5:], priors=pos[5:] + rng.normal(0, 5, (9, 3)), comm_range=250.0)
    res = run_time_slot(net, cfg(l_max=13, comm_range=250.0), SeedPlan(0))
    assert res.counters.belief_updates == 9 * 13


def eau_network(seed=6):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 200, (18, 3))
    priors = pos[8:] + rng.normal(0, 5, (10, 3))
    return make_network(pos[:8], pos[8:], priors=priors, comm_range=400.0)


def test_eau_never_adds_updates():
    off = run_time_slot(eau_network(), cfg(l_max=20, noise_std=0.05), SeedPlan(0))
    on = run_time_slot(eau_network(), cfg(l_max=20, noise_std=0.05, eau=EauParams(0.05, 0.5, True)), SeedPlan(0))
    assert on.counters.pseudo_anchor_upgrades > 0
    assert on.counters.belief_updates < off.counters.belief_updates


def test_pseudo_anchor_belief_is_frozen():
    config = cfg(l_max=20, noise_std=0.05, eau=EauParams(0.05, 0.5, True))
    state, links = prepare(eau_network(), config, deterministic=False)
    frozen = {}
    for l in range(1, 21):
        links = run_iteration(state, links, config, l)
        for k, (m, v) in frozen.items():
            assert np.array_equal(state.mean[k], m) and np.array_equal(state.var[k], v)
        for k in np.flatnonzero(state.eau.pseudo):
            frozen.setdefault(int(k), (state.mean[k].copy(), state.var[k].copy()))
    assert frozen


def test_skip_flag_clears_after_one_iteration(tetra_anchors):
    net = make_network(tetra_anchors, [[30, 40, 10]], priors=[[40, 30, 20]])
    config = cfg(eau=EauParams(0.05, 0.5, True))
    state, links = prepare(net, config)
    state.eau.status[4] = AgentStatus.SKIP_NEXT
    mean = state.mean[4].copy()
    links = run_iteration(state, links, config, 1)
    assert np.array_equal(state.mean[4], mean)
    assert state.counters.skipped_updates == 1 and state.eau.status[4] == AgentStatus.ACTIVE
    run_iteration(state, links, config, 2)
    assert not np.array_equal(state.mean[4], mean)


def test_jacobi_result_ignores_link_order():
    config = cfg(l_max=1)
    state_a, links = prepare(eau_network(), config, deterministic=False)
    state_b, _ = prepare(eau_network(), config, deterministic=False)
    perm = np.random.default_rng(0).permutation(len(links))
    for l in range(1, 6):
        links_a = run_iteration(state_a, links, config, l)
        run_iteration(state_b, links.subset(perm), config, l)
        links = links_a
        assert np.array_equal(state_a.mean, state_b.mean)
        assert np.array_equal(state_a.var, state_b.var)


def test_jacobi_result_ignores_node_list_order():
    base = eau_network()
    nodes = list(base.nodes)
    np.random.default_rng(1).shuffle(nodes)
    shuffled = Network(nodes, base.comm_range)
    a = run_time_slot(eau_network(), cfg(l_max=10), SeedPlan(4))
    b = run_time_slot(shuffled, cfg(l_max=10), SeedPlan(4))
    assert np.array_equal(a.estimates, b.estimates)


# --- time slots --------------------------------------------------------------

def test_lmax_zero_returns_predictions():
    net = eau_network()
    res = run_time_slot(net, cfg(l_max=0), SeedPlan(0))
    np.testing.assert_array_equal(res.estimates, res.predicted)
    np.testing.assert_array_equal(res.predicted, net.beliefs()[0][~net.is_anchor])


def test_static_slots_carry_belief_forward():
    net = eau_network()
    config = cfg(l_max=5, n_slots=2)
    seeds = SeedPlan(0)
    first = run_time_slot(net, config, seeds)
    mean, var = net.beliefs()
    t_mean, t_var, _ = _temporal(net, config, seeds, 0, np.zeros((len(mean), 3)))
    np.testing.assert_array_equal(t_mean, mean)
    np.testing.assert_array_equal(t_var[~net.is_anchor], var[~net.is_anchor])
    second = run_time_slot(net, config, seeds)
    np.testing.assert_array_equal(second.predicted, first.estimates)
    np.testing.assert_array_equal(second.true_positions, first.true_positions)


def test_seeded_run_is_repeatable():
    def once():
        rng = np.random.default_rng(10)
        pos = rng.uniform(0, 300, (18, 3))
        net = make_network(pos[:8], pos[8:], priors=pos[8:] + rng.normal(0, 8, (10, 3)), comm_range=300.0)
        config = cfg(l_max=10, n_slots=3, mobility=MobilityParams(1.0, 0.1))
        return [run_time_slot(net, config, SeedPlan(77)) for _ in range(3)]
    a, b = once(), once()
    for x, y in zip(a, b):
        assert np.array_equal(x.estimates, y.estimates)
        assert np.array_equal(x.true_positions, y.true_positions)


def test_counters_merge_and_report():
    a = Counters(belief_updates=3, agent_broadcasts=2, agent_scalars_broadcast=12)
    a.merge(Counters(belief_updates=4))
    d = a.as_dict()
    assert d["belief_updates"] == 7
    assert d["scalars_per_agent_iteration"] == 6.0
    assert d["stated_scalars_per_agent_iteration"] == 14


def test_seed_plan_streams():
    plan = SeedPlan(123)
    a = plan.rng(0, Stream.RANGING, 1).random(4)
    assert np.array_equal(a, plan.rng(0, Stream.RANGING, 1).random(4))
    others = [plan.rng(1, Stream.RANGING, 1), plan.rng(0, Stream.NLOS_BIAS, 1),
              plan.rng(0, Stream.RANGING, 2), SeedPlan(124).rng(0, Stream.RANGING, 1)]
    for g in others:
        assert not np.array_equal(a, g.random(4))
