import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridsec.errors import DivergenceError
from gridsec.powerflow import (
    StateVector,
    dc_line_flows,
    h_jacobian,
    h_measure,
    h_vjp,
    solve_ac_power_flow,
)


def _random_state(rng, n, ref=0, spread=0.4):
    theta = rng.uniform(-spread, spread, n)
    theta[ref] = 0.0
    return StateVector(theta, rng.uniform(0.9, 1.1, n))


def test_flat_state_has_no_injections(case14):
    np.testing.assert_allclose(h_measure(case14, StateVector.flat(14)), 0.0, atol=1e-14)


def test_toy_small_angle_matches_dc(toy):
    P = h_measure(toy, StateVector([0, 0.1, 0], [1, 1, 1]))[:3]
    # sin(0.1)/0.1 linearisation error is ~0.17%
    np.testing.assert_allclose(P, [-1.0, 2.0, -1.0], rtol=2e-3)


def test_lossless_conservation(case14, rng):
    for _ in range(50):
        z = h_measure(case14, _random_state(rng, 14))
        assert abs(z[:14].sum()) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(float, 13, elements=st.floats(-0.05, 0.05)))
def test_dc_consistency_small_angles(bundle14, case14, th):
    theta = np.concatenate([[0.0], th])
    P = h_measure(case14, StateVector(theta, np.ones(14)))[:14]
    P_dc = bundle14.B @ theta
    scale = max(np.max(np.abs(P_dc)), 1e-12)
    assert np.max(np.abs(P - P_dc)) <= 0.01 * scale


def test_jacobian_matches_finite_differences(case14, rng):
    x = _random_state(rng, 14)
    J = h_jacobian(case14, x.theta, x.v)
    step = 1e-6
    for k in range(28):
        dth = np.zeros(14)
        dv = np.zeros(14)
        if k < 14:
            dth[k] = step
        else:
            dv[k - 14] = step
        fd = (h_measure(case14, (x.theta + dth, x.v + dv)) - h_measure(case14, (x.theta - dth, x.v - dv))) / (2 * step)
        np.testing.assert_allclose(J[:, k], fd, atol=1e-7)


def test_vjp_batched(case14, rng):
    th = rng.uniform(-0.3, 0.3, (4, 5, 14))
    v = rng.uniform(0.9, 1.1, (4, 5, 14))
    g = rng.normal(size=(4, 5, 28))
    gt, gv = h_vjp(case14, th, v, g)
    J = h_jacobian(case14, th[2, 3], v[2, 3])
    np.testing.assert_allclose(np.concatenate([gt[2, 3], gv[2, 3]]), g[2, 3] @ J, atol=1e-12)


def test_zero_loads_give_flat_state(case14):
    x = solve_ac_power_flow(case14, np.zeros(14), np.zeros(14))
    np.testing.assert_array_equal(x.theta, 0)
    np.testing.assert_array_equal(x.v, 1)


def test_toy_solution_agrees_with_dc(toy, toy_bundle):
    p_load = np.array([0.0, -2.0, 1.0])
    theta_dc = np.zeros(3)
    theta_dc[1:] = np.linalg.solve(toy_bundle.B_red, -p_load[1:])
    np.testing.assert_allclose(theta_dc, [0, 0.1, 0], atol=1e-12)
    x = solve_ac_power_flow(toy, p_load, np.zeros(3))
    assert abs(x.theta[1] - 0.1) < 0.02 * 0.1
    assert abs(x.theta[2]) < 0.002


def test_base_case_converges_quickly(case14):
    x, it = solve_ac_power_flow(case14, case14.p_load, case14.q_load, return_iterations=True)
    assert it <= 10
    assert it == 4  # regression value
    z = h_measure(case14, x)
    np.testing.assert_allclose(z[1:14], -case14.p_load[1:], atol=1e-8)
    np.testing.assert_allclose(z[15:], -case14.q_load[1:], atol=1e-8)
    assert x.is_valid(case14.ref)


def test_round_trip(case14, rng):
    for _ in range(20):
        scale = rng.uniform(0.3, 1.6, 14)
        x = solve_ac_power_flow(case14, case14.p_load * scale, case14.q_load * scale)
        z = h_measure(case14, x)
        back = solve_ac_power_flow(case14, -z[:14], -z[14:])
        np.testing.assert_allclose(back.theta, x.theta, atol=1e-6)
        np.testing.assert_allclose(back.v, x.v, atol=1e-6)


def test_divergence_reports_mismatch(case14):
    with pytest.raises(DivergenceError) as info:
        solve_ac_power_flow(case14, case14.p_load * 10, case14.q_load * 10)
    assert info.value.mismatch > 0


def test_dc_flows(toy, toy_bundle, bundle14, rng):
    np.testing.assert_array_equal(dc_line_flows(toy_bundle, np.zeros(3)), 0)
    np.testing.assert_allclose(dc_line_flows(toy_bundle, [0, 0.1, 0]), [-1.0, 0.0, 1.0], atol=1e-12)
    for _ in range(20):
        theta = np.concatenate([[0], rng.normal(0, 0.2, 13)])
        f = dc_line_flows(bundle14, theta)
        np.testing.assert_allclose(bundle14.M @ f, bundle14.B @ theta, atol=1e-12)


def test_flow_antisymmetry(case14, rng):
    from gridsec.grid_model import Branch, GridCase, build_matrices
    swapped = GridCase(case14.buses, tuple(Branch(b.id, b.to_bus, b.from_bus, b.b, b.f_limit) for b in case14.branches))
    theta = np.concatenate([[0], rng.normal(0, 0.2, 13)])
    f1 = dc_line_flows(build_matrices(case14), theta)
    f2 = dc_line_flows(build_matrices(swapped), theta)
    np.testing.assert_allclose(f1, -f2, atol=1e-12)
