import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_lnms.errors import InvalidParameter, NoActiveMode, NoConvergence, NotConverged
from hybrid_lnms.pwa_systems import (
    EPS_GUARD,
    Polytope,
    PwaMode,
    PwaSystem,
    active_mode,
    build_cart_wall,
    build_elastic_pendulum,
    compute_invariant_set,
    dare_residual,
    lqr_gain,
    lqr_terminal_constraints,
    simulate_step,
    solve_dare,
)

from oracles import lyapunov_sum


@pytest.fixture(scope="module")
def cart():
    return build_cart_wall()


@pytest.fixture(scope="module")
def pendulum():
    return build_elastic_pendulum()


def test_cart_mode_selection(cart):
    # predicted position 0.51 stays left of the wall
    assert active_mode(cart, [0.5, 1.0], [0.0]) == 0
    # predicted position 0.755 reaches it
    assert active_mode(cart, [0.745, 1.0], [0.0]) == 1


def test_pendulum_origin_is_free(pendulum):
    assert active_mode(pendulum, [0.0, 0.0], [0.0]) == 0


def test_cart_free_step(cart):
    x, m = simulate_step(cart, [0.5, 1.0], [2.0])
    np.testing.assert_allclose(x, [0.51, 1.02], atol=1e-15)
    assert m == 0


def test_cart_wall_step(cart):
    x, m = simulate_step(cart, [0.745, 1.0], [0.0])
    np.testing.assert_allclose(x, [0.745, -0.9], atol=1e-15)
    assert m == 1


@pytest.mark.parametrize("builder", [build_cart_wall, lambda: build_cart_wall(2), build_elastic_pendulum])
def test_origin_is_fixed_point(builder):
    s = builder()
    x, _ = simulate_step(s, np.zeros(2), np.zeros(1))
    np.testing.assert_array_equal(x, np.zeros(2))


def test_cart_builder_shapes():
    one = build_cart_wall(1)
    two = build_cart_wall(2)
    assert (one.n_modes, one.n_x, one.n_u) == (2, 2, 1)
    assert two.n_modes == 3


def test_cart_zero_restitution():
    s = build_cart_wall(1, eps=0.0)
    x, _ = simulate_step(s, [0.745, 1.0], [0.0])
    assert x[1] == 0.0


def test_cart_left_wall():
    s = build_cart_wall(2)
    x, m = simulate_step(s, [-0.745, -1.0], [0.0])
    assert m == 2
    np.testing.assert_allclose(x, [-0.745, 0.9])


@pytest.mark.parametrize("kw", [dict(m=0.0), dict(dt=-0.01), dict(eps=1.5), dict(n_walls=3)])
def test_cart_rejects_bad_parameters(kw):
    with pytest.raises(InvalidParameter):
        build_cart_wall(**kw)


def test_pendulum_euler_matrices(pendulum):
    np.testing.assert_allclose(pendulum.modes[0].A, [[1.0, 0.01], [0.1, 1.0]], atol=1e-15)
    np.testing.assert_allclose(pendulum.modes[1].A, [[1.0, 0.01], [0.1 - 1.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(pendulum.modes[1].c, [0.0, 0.1], atol=1e-15)


def test_pendulum_without_wall_stiffness():
    s = build_elastic_pendulum(k=0.0)
    np.testing.assert_array_equal(s.modes[0].A, s.modes[1].A)
    np.testing.assert_array_equal(s.modes[1].c, np.zeros(2))


def test_pendulum_boundary_at_zero():
    s = build_elastic_pendulum(d=0.0)
    assert active_mode(s, [0.0, 0.0], [0.0]) == 0
    assert active_mode(s, [1e-6, 0.0], [0.0]) == 1
    assert active_mode(s, [-1e-6, 0.0], [0.0]) == 0


def test_no_active_mode_raises():
    mode = PwaMode(np.eye(1), np.zeros((1, 1)), np.zeros(1), [[1.0]], [[0.0]], [0.0])
    s = PwaSystem((mode,), [-1.0], [1.0], [-1.0], [1.0], 0.1)
    with pytest.raises(NoActiveMode):
        active_mode(s, [0.5], [0.0])


def test_tie_goes_to_lowest_index(cart):
    # exactly on the wall: both guards hold within the tolerance
    x = np.array([0.75, 0.0])
    assert cart.modes[0].guard_violation(x, [0.0]) <= EPS_GUARD
    assert cart.modes[1].guard_violation(x, [0.0]) <= EPS_GUARD
    assert active_mode(cart, x, [0.0]) == 0


@pytest.mark.parametrize("builder", [build_cart_wall, lambda: build_cart_wall(2), build_elastic_pendulum])
def test_guard_coverage_on_grid(builder):
    s = builder()
    g1 = np.linspace(s.x_min[0], s.x_max[0], 200)
    g2 = np.linspace(s.x_min[1], s.x_max[1], 200)
    X = np.array(np.meshgrid(g1, g2)).reshape(2, -1).T
    viol = np.stack([
        (X @ m.guard_H.T - m.guard_k).max(axis=1) for m in s.modes
    ])
    assert np.all(viol.min(axis=0) <= EPS_GUARD)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1.0, 1.0), st.floats(-10.0, 10.0), st.floats(-100.0, 100.0),
    st.sampled_from([1, 2]),
)
def test_wall_modes_flip_velocity(x1, x2, u, walls):
    s = build_cart_wall(walls)
    x, m = simulate_step(s, [x1, x2], [u])
    if m > 0:
        assert x[1] * x2 <= 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-10.0, 10.0), st.floats(-5.0, 5.0))
def test_simulation_is_deterministic(x1, x2, u):
    s = build_cart_wall()
    a, ma = simulate_step(s, [x1, x2], [u])
    b, mb = simulate_step(s, [x1, x2], [u])
    assert ma == mb and a.tobytes() == b.tobytes()


def test_system_json_round_trip(pendulum):
    doc = pendulum.to_dict()
    assert set(doc) >= {"modes", "n_x", "n_u", "dt", "x_min", "x_max", "u_min", "u_max"}
    assert set(doc["modes"][0]) == {"A", "B", "c", "guard_H", "guard_J", "guard_k"}
    back = PwaSystem.from_json(pendulum.to_json())
    for a, b in zip(pendulum.modes, back.modes):
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.guard_k, b.guard_k)
    np.testing.assert_array_equal(back.x_max, pendulum.x_max)


def test_polytope_round_trip():
    p = Polytope.box([-1.0, -2.0], [1.0, 2.0])
    q = Polytope.from_dict(p.to_dict())
    np.testing.assert_array_equal(p.F, q.F)
    assert q.contains([0.5, -1.5]) and not q.contains([1.5, 0.0])


# -- Riccati ----------------------------------------------------------------


def test_dare_scalar_golden_ratio():
    P = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(P[0, 0] - (1 + np.sqrt(5)) / 2) < 1e-9


def test_dare_without_input_is_lyapunov_sum():
    A = np.array([[0.5, 0.2], [0.0, 0.3]])
    B = np.zeros((2, 1))
    P = solve_dare(A, B, np.eye(2), [[1.0]])
    np.testing.assert_allclose(P, lyapunov_sum(A, np.eye(2)), atol=1e-9)


def test_dare_zero_dynamics():
    Q = np.diag([2.0, 3.0])
    P = solve_dare(np.zeros((2, 2)), np.ones((2, 1)), Q, [[1.0]])
    np.testing.assert_allclose(P, Q, atol=1e-14)


def test_dare_cart_residual(cart):
    m = cart.modes[0]
    P = solve_dare(m.A, m.B, np.eye(2), [[0.001]])
    assert dare_residual(m.A, m.B, np.eye(2), [[0.001]], P) < 1e-10


def test_dare_unstabilizable():
    with pytest.raises(NoConvergence):
        solve_dare([[2.0]], [[0.0]], [[1.0]], [[1.0]], max_iter=500)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 1.5), st.floats(0.1, 2.0), st.floats(0.01, 10.0))
def test_dare_residual_property(a, b, r):
    A = np.array([[1.0, 0.1], [0.0, a]])
    B = np.array([[0.0], [b]])
    P = solve_dare(A, B, np.eye(2), [[r]])
    assert dare_residual(A, B, np.eye(2), [[r]], P) < 1e-10
    assert np.all(np.linalg.eigvalsh(P) > 0)


# -- invariant sets -----------------------------------------------------------


def test_invariant_set_of_zero_map():
    box = Polytope.box([-1.0, -1.0], [1.0, 1.0])
    S = compute_invariant_set(np.zeros((2, 2)), box)
    np.testing.assert_array_equal(S.F, box.F)
    np.testing.assert_array_equal(S.g, box.g)


def test_invariant_set_of_contraction():
    box = Polytope.box([-1.0, -1.0], [1.0, 1.0])
    S = compute_invariant_set(0.5 * np.eye(2), box)
    assert S.n_rows == 4


def test_invariant_set_cap():
    box = Polytope.box([-1.0, -1.0], [1.0, 1.0])
    rot = 0.999 * np.array([[np.cos(0.01), -np.sin(0.01)], [np.sin(0.01), np.cos(0.01)]])
    with pytest.raises(NotConverged) as info:
        compute_invariant_set(rot, box, max_iter=3)
    assert info.value.partial is not None and info.value.partial.n_rows > 4


def _sample_inside(S, rng, lo, hi, n):
    pts = rng.uniform(lo, hi, size=(20 * n, len(lo)))
    inside = pts[np.all(pts @ S.F.T <= S.g + 1e-12, axis=1)]
    return inside[:n]


@pytest.mark.parametrize("builder", [build_cart_wall, build_elastic_pendulum])
def test_lqr_invariant_set_is_invariant(builder):
    s = builder()
    m = s.modes[0]
    R = [[0.001]] if builder is build_cart_wall else [[1.0]]
    K = lqr_gain(m.A, m.B, np.eye(2), R)
    A_cl = m.A - m.B @ K
    S = compute_invariant_set(A_cl, lqr_terminal_constraints(s, K))
    assert S.contains(np.zeros(2))
    rng = np.random.default_rng(3)
    pts = _sample_inside(S, rng, s.x_min, s.x_max, 10_000)
    assert len(pts) > 100
    nxt = pts @ A_cl.T
    assert np.all(nxt @ S.F.T <= S.g + 1e-9)
