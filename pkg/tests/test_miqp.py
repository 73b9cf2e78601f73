import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_lnms.errors import InfeasibleProblem, InvalidModeSequence, TooManySequences, UnboundedBox
from hybrid_lnms.miqp import (
    BnbConfig,
    HybridOcp,
    MiqpStatus,
    compute_big_m,
    enumerate_exhaustive,
    solve_bnb,
    solve_fixed_modes,
)
from hybrid_lnms.ocp import assemble_fixed_mode_ocp, one_hot, reachable_modes, unpack_trajectory
from hybrid_lnms.pwa_systems import PwaMode, PwaSystem, build_cart_wall, simulate_step, solve_dare
from hybrid_lnms.qp_core import QpStatus, check_feasibility

from oracles import batch_lqr, trajectory_violation


def cart_ocp(N, u_max=100.0, walls=1):
    s = build_cart_wall(walls, u_max=u_max)
    m = s.modes[0]
    P = solve_dare(m.A, m.B, np.eye(2), [[0.001]])
    return HybridOcp(s, N, np.eye(2), [[0.001]], 1000 * P)


@pytest.fixture(scope="module")
def ocp4():
    return cart_ocp(4)


@pytest.fixture(scope="module")
def ocp10():
    return cart_ocp(10)


# -- fixed-mode transcription ------------------------------------------------------


def test_single_step_at_origin():
    ocp = cart_ocp(1)
    sol = solve_qp_for(ocp, (0,), [0.0, 0.0])
    assert sol.status is QpStatus.OPTIMAL
    assert abs(sol.z[0]) < 1e-9 and abs(sol.objective) < 1e-9


def solve_qp_for(ocp, modes, x):
    return solve_fixed_modes(ocp, modes, x)


def test_pure_input_penalty_gives_zero_input():
    s = build_cart_wall()
    ocp = HybridOcp(s, 2, np.zeros((2, 2)), [[1.0]], np.zeros((2, 2)))
    sol = solve_qp_for(ocp, (0, 0), [0.1, 0.5])
    u, _ = unpack_trajectory(ocp, [0.1, 0.5], sol.z)
    np.testing.assert_allclose(u, 0.0, atol=1e-8)


def test_free_sequence_matches_batch_lqr(ocp10):
    # small enough that no bound is active
    x0 = np.array([0.05, 0.0])
    sol = solve_qp_for(ocp10, (0,) * 10, x0)
    m = ocp10.system.modes[0]
    u_ref, x_ref, cost = batch_lqr(m.A, m.B, ocp10.Q, ocp10.R, ocp10.P_term, 10, x0)
    u, x = unpack_trajectory(ocp10, x0, sol.z)
    assert np.abs(u_ref).max() < 100.0
    assert sol.objective == pytest.approx(cost, rel=1e-6, abs=1e-6)
    np.testing.assert_allclose(u, u_ref, atol=1e-6)
    np.testing.assert_allclose(x, x_ref, atol=1e-6)


def test_one_hot_and_integer_sequences_agree(ocp4):
    x0 = [0.3, 2.0]
    a = assemble_fixed_mode_ocp(ocp4, (0, 0, 1, 0), x0)
    b = assemble_fixed_mode_ocp(ocp4, one_hot((0, 0, 1, 0), 2), x0)
    np.testing.assert_array_equal(a.A_in, b.A_in)
    np.testing.assert_array_equal(a.b_eq, b.b_eq)


@pytest.mark.parametrize("modes", [(0, 0, 0), (0, 0, 0, 5), [[1, 1], [0, 1], [1, 0], [1, 0]], (0.5, 0, 0, 0)])
def test_bad_mode_sequences(ocp4, modes):
    with pytest.raises(InvalidModeSequence):
        assemble_fixed_mode_ocp(ocp4, modes, [0.0, 0.0])


def test_feasibility_deep_inside_free_region(ocp10):
    x0 = np.array([0.1, 0.5])
    # zero input keeps every step in the free mode
    x = x0.copy()
    for _ in range(10):
        x, m = simulate_step(ocp10.system, x, [0.0])
        assert m == 0
    ok, viol = check_feasibility(assemble_fixed_mode_ocp(ocp10, (0,) * 10, x0))
    assert ok and viol < 1e-7


# -- big-M ------------------------------------------------------------------------


def _residual_samples(ocp, n=50):
    s = ocp.system
    g = [np.linspace(lo, hi, n) for lo, hi in zip(s.x_min, s.x_max)]
    gu = np.linspace(s.u_min[0], s.u_max[0], n)
    X = np.array(np.meshgrid(*g)).reshape(2, -1).T
    worst = 0.0
    for u in gu:
        U = np.full((len(X), 1), u)
        for m in s.modes:
            pred = X @ m.A.T + U @ m.B.T + m.c
            # x+ anywhere in the state box
            for corner in (s.x_min, s.x_max):
                worst = max(worst, float(np.max(np.abs(corner - pred))))
            if m.guard_H.shape[0]:
                worst = max(worst, float(np.max(X @ m.guard_H.T + U @ m.guard_J.T - m.guard_k)))
    return worst


def test_big_m_dominates_sampled_residuals():
    ocp = cart_ocp(4, u_max=10.0)
    M = compute_big_m(ocp)
    assert np.isfinite(M)
    assert M >= _residual_samples(ocp)


def test_big_m_of_zero_dynamics():
    mode = PwaMode(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0))
    s = PwaSystem((mode,), [-1.0], [1.0], [-1.0], [1.0], 1.0)
    ocp = HybridOcp(s, 1, [[1.0]], [[1.0]], [[1.0]])
    assert compute_big_m(ocp) == pytest.approx(1.1)


def test_big_m_scales_with_bounds():
    small = cart_ocp(2, u_max=10.0)
    s = build_cart_wall(x_max=(2.0, 20.0), u_max=20.0)
    big = HybridOcp(s, 2, np.eye(2), [[0.001]], np.eye(2))
    assert compute_big_m(big) >= 2 * compute_big_m(small) - 1e-12


def test_big_m_needs_bounds():
    mode = PwaMode(np.eye(1), np.eye(1), np.zeros(1), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0))
    s = PwaSystem((mode,), [-np.inf], [np.inf], [-1.0], [1.0], 1.0)
    with pytest.raises(UnboundedBox):
        HybridOcp(s, 1, [[1.0]], [[1.0]], [[1.0]])


# -- branch and bound ---------------------------------------------------------------


def test_bnb_matches_enumeration(ocp4):
    x0 = [0.2, 0.0]
    b = solve_bnb(ocp4, x0, config=BnbConfig(gap_tol=0.0))
    e = enumerate_exhaustive(ocp4, x0)
    assert b.status is MiqpStatus.OPTIMAL
    assert abs(b.objective - e.objective) < 1e-6


def test_origin_costs_nothing(ocp10):
    sol = solve_bnb(ocp10, [0.0, 0.0])
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    assert sol.modes == (0,) * 10


def test_feasible_warm_start_early_stop(ocp10):
    x0 = [0.3, -2.0]
    warm = (0,) * 10
    sol = solve_bnb(ocp10, x0, warm, BnbConfig(stop_at_first_feasible=True))
    assert sol.status is MiqpStatus.FEASIBLE_EARLY_STOP
    assert sol.nodes_explored == 0 and sol.warm_start_feasible
    assert sol.objective == pytest.approx(solve_fixed_modes(ocp10, warm, x0).objective, abs=1e-12)


def test_infeasible_warm_start_is_flagged(ocp10):
    x0 = [0.3, -2.0]
    sol = solve_bnb(ocp10, x0, (1,) * 10, BnbConfig(stop_at_first_feasible=True))
    assert not sol.warm_start_feasible and sol.warm_started
    assert sol.status is MiqpStatus.FEASIBLE_EARLY_STOP and sol.nodes_explored > 0


def test_enumeration_counts_sequences():
    ocp = cart_ocp(1)
    sol = enumerate_exhaustive(ocp, [0.2, 0.0])
    assert sol.qp_solves == 2


def test_out_of_bounds_state_is_infeasible(ocp4):
    with pytest.raises(InfeasibleProblem):
        enumerate_exhaustive(ocp4, [2.0, 0.0])
    with pytest.raises(InfeasibleProblem):
        solve_bnb(ocp4, [2.0, 0.0])


def test_enumeration_limit():
    s = build_cart_wall(2)
    ocp = HybridOcp(s, 13, np.eye(2), [[1.0]], np.eye(2))
    with pytest.raises(TooManySequences):
        enumerate_exhaustive(ocp, [0.0, 0.0])


def test_node_limit_returns_time_limit(ocp10):
    sol = solve_bnb(ocp10, [0.6, 8.0], config=BnbConfig(node_limit=0))
    assert sol.status is MiqpStatus.TIME_LIMIT
    assert sol.nodes_explored == 0


def test_record_is_json(ocp4):
    rec = solve_bnb(ocp4, [0.5, 5.0], (0, 0, 0, 0)).to_record()
    assert set(rec) == {"status", "objective", "gap", "nodes", "time_s", "warm_started", "warm_start_feasible"}
    json.dumps(rec)


@pytest.fixture(scope="module")
def random_states():
    rng = np.random.default_rng(17)
    return rng.uniform([0.1, -10.0], [0.75, 10.0], size=(12, 2))


def test_solutions_are_sound(ocp10, random_states):
    for x0 in random_states:
        sol = solve_bnb(ocp10, x0)
        assert sol.status is MiqpStatus.OPTIMAL and sol.gap <= 1e-6
        assert trajectory_violation(ocp10, x0, sol.modes, sol.u, sol.x) < 1e-6


def test_relaxation_bounds_increase_down_the_tree(ocp10, random_states):
    for x0 in random_states[:6]:
        sol = solve_bnb(ocp10, x0, config=BnbConfig(gap_tol=0.0, record_tree=True))
        value = {node: v for node, _, v in sol.tree}
        for node, parent, v in sol.tree:
            if parent in value and np.isfinite(value[parent]):
                assert v >= value[parent] - 1e-6 * max(1.0, abs(value[parent]))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 0.75), st.floats(-10.0, 10.0))
def test_warm_start_dominates_cold_start(x1, x2):
    ocp = cart_ocp(6)
    x0 = [x1, x2]
    cfg = BnbConfig(gap_tol=0.0)
    cold = solve_bnb(ocp, x0, config=cfg)
    warm = solve_bnb(ocp, x0, cold.modes, cfg)
    assert warm.objective <= cold.objective + 1e-9
    assert warm.nodes_explored <= cold.nodes_explored


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 0.75), st.floats(-10.0, 10.0))
def test_doubling_big_m_keeps_objective(x1, x2):
    ocp = cart_ocp(5)
    a = solve_bnb(ocp, [x1, x2], config=BnbConfig(gap_tol=0.0))
    b = solve_bnb(ocp.with_big_m(2 * ocp.big_M), [x1, x2], config=BnbConfig(gap_tol=0.0))
    assert abs(a.objective - b.objective) < 1e-6


# -- reachability presolve -------------------------------------------------------------


def test_walls_out_of_reach_near_origin():
    s = build_cart_wall(2, u_max=10.0)
    ocp = HybridOcp(s, 25, np.eye(2), [[0.001]], np.eye(2))
    assert reachable_modes(ocp, [0.0, 0.1]) == [(0,)] * 25
    # the first step is exact: predicted position 0.76 is past the wall
    assert reachable_modes(ocp, [0.74, 2.0])[0] == (1,)
    # drifting slowly towards the wall: contact becomes possible later on
    drift = reachable_modes(ocp, [0.7, 0.5])
    assert drift[0] == (0,) and (0, 1) in drift[1:]


def test_unreachable_box_gives_none(ocp4):
    assert reachable_modes(ocp4, [2.0, 0.0]) is None


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 0.75), st.floats(-10.0, 10.0))
def test_reachability_keeps_every_feasible_sequence(x1, x2):
    ocp = cart_ocp(4)
    reach = reachable_modes(ocp, [x1, x2])
    for seq in itertools.product(range(2), repeat=4):
        if solve_fixed_modes(ocp, seq, [x1, x2]).status is QpStatus.OPTIMAL:
            assert all(m in allowed for m, allowed in zip(seq, reach))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 0.75), st.floats(-10.0, 10.0))
def test_presolve_does_not_change_the_optimum(x1, x2):
    ocp = cart_ocp(6)
    a = solve_bnb(ocp, [x1, x2], config=BnbConfig(gap_tol=0.0))
    b = solve_bnb(ocp, [x1, x2], config=BnbConfig(gap_tol=0.0, presolve=False))
    assert abs(a.objective - b.objective) < 1e-6
    assert a.nodes_explored <= b.nodes_explored
