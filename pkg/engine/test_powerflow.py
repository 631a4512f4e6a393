"""
Newton power flow and linear sensitivities
"""
import math

import numpy as np
import pytest

from conftest import feeder, two_bus
from models.case import BranchRecord, BusKind, BusRecord, Network
from models.errors import PowerFlowError, SingularJacobianError
from services.powerflow import (
    branch_flows,
    build_sensitivities,
    flat_state,
    linearization_error_report,
    predict_linear,
    solve_ac_powerflow,
)


def test_zero_injection_is_flat():
    state = solve_ac_powerflow(two_bus(), [0.0, 0.0], [0.0, 0.0])
    assert state.converged
    assert state.iterations == 0
    np.testing.assert_allclose(state.v, 1.0)
    np.testing.assert_allclose(state.theta, 0.0)


def test_two_bus_closed_form():
    """With Q chosen to hold V2 at 1, sin(theta2) = x * P"""
    x, p = 0.1, 1.0
    q = (1.0 - math.sqrt(1.0 - (x * p) ** 2)) / x
    state = solve_ac_powerflow(two_bus(x), [0.0, p], [0.0, q])
    assert state.theta[1] == pytest.approx(math.asin(x * p), abs=1e-9)
    assert state.v[1] == pytest.approx(1.0, abs=1e-9)
    assert state.p_inj[0] == pytest.approx(-p, abs=1e-8)


def test_radial_voltages_fall_along_the_feeder():
    network = feeder(3, r=0.05, x=0.08)
    state = solve_ac_powerflow(network, [0.0, -0.3, -0.3], [0.0, -0.1, -0.1])
    assert state.v[0] > state.v[1] > state.v[2]


def test_overload_does_not_converge():
    with pytest.raises((PowerFlowError, SingularJacobianError)):
        solve_ac_powerflow(two_bus(0.1), [0.0, -20.0], [0.0, 0.0])


def test_injection_length_is_checked():
    with pytest.raises(ValueError):
        solve_ac_powerflow(two_bus(), [0.0], [0.0])


def test_two_bus_sensitivities_at_flat_start():
    bundle = build_sensitivities(two_bus(0.1))
    assert bundle.non_slack == [2]
    assert bundle.a_p[0, 1] == pytest.approx(0.1)
    assert bundle.a_p[0, 0] == 0.0
    # from-end flow of 1-2 carries whatever bus 2 injects, with the opposite sign
    assert bundle.f_p[0, 1] == pytest.approx(-1.0)


def test_lossless_network_decouples_p_and_v():
    bundle = build_sensitivities(feeder(4, r=0.0, x=0.05))
    np.testing.assert_allclose(bundle.s_v, 0.0, atol=1e-12)
    np.testing.assert_allclose(bundle.a_q, 0.0, atol=1e-12)


def test_isolated_bus_names_the_degenerate_bus():
    network = Network(
        name="island",
        buses=[BusRecord(id=1, kind=BusKind.SLACK), BusRecord(id=2), BusRecord(id=7)],
        branches=[BranchRecord(from_bus=1, to_bus=2, x=0.1)],
    )
    with pytest.raises(SingularJacobianError) as exc:
        build_sensitivities(network)
    assert exc.value.bus == 7


def test_expansion_point_is_reproduced():
    network = feeder(4, r=0.03, x=0.06)
    point = solve_ac_powerflow(network, [0.0, -0.2, -0.1, -0.2], [0.0, -0.05, -0.02, -0.05])
    bundle = build_sensitivities(network, point)
    linear = predict_linear(bundle, point.p_inj, point.q_inj)
    np.testing.assert_allclose(linear["v"], point.v[1:], atol=1e-9)
    np.testing.assert_allclose(linear["theta"], point.theta[1:], atol=1e-9)
    line_p, line_q = branch_flows(network, point)
    np.testing.assert_allclose(linear["line_p"], line_p, atol=1e-9)
    np.testing.assert_allclose(linear["line_q"], line_q, atol=1e-9)


def test_prediction_is_affine():
    network = feeder(4)
    bundle = build_sensitivities(network)
    base = predict_linear(bundle, np.zeros(4), np.zeros(4))
    dp = np.array([0.0, -0.1, 0.05, -0.2])
    dq = np.array([0.0, -0.02, 0.0, -0.04])
    once = predict_linear(bundle, dp, dq)
    twice = predict_linear(bundle, 2 * dp, 2 * dq)
    for key in ("theta", "v", "line_p", "line_q"):
        np.testing.assert_allclose(twice[key] - base[key], 2 * (once[key] - base[key]), atol=1e-12)


def test_dimension_mismatch():
    bundle = build_sensitivities(two_bus())
    with pytest.raises(ValueError):
        predict_linear(bundle, [0.0, 0.0, 0.0], [0.0, 0.0])


@pytest.mark.parametrize("bus", [2, 3])
def test_sensitivities_match_finite_differences(bus):
    network = feeder(3, r=0.04, x=0.07)
    point = flat_state(network)
    bundle = build_sensitivities(network, point)
    h = 1e-4
    column = bundle.column(bus)
    for kind, theta_block, v_block in (("p", bundle.a_p, bundle.b_p), ("q", bundle.a_q, bundle.b_q)):
        states = []
        for sign in (1.0, -1.0):
            p, q = point.p_inj.copy(), point.q_inj.copy()
            (p if kind == "p" else q)[column] += sign * h
            states.append(solve_ac_powerflow(network, p, q, tol=1e-12))
        d_theta = (states[0].theta[1:] - states[1].theta[1:]) / (2 * h)
        d_v = (states[0].v[1:] - states[1].v[1:]) / (2 * h)
        assert theta_block[:, column] == pytest.approx(d_theta, rel=1e-5, abs=1e-7)
        assert v_block[:, column] == pytest.approx(d_v, rel=1e-5, abs=1e-7)


def test_error_report_is_zero_at_the_point():
    network = feeder(4)
    bundle = build_sensitivities(network)
    report = linearization_error_report(network, bundle, [(bundle.point.p_inj, bundle.point.q_inj)])
    assert report.samples == 1
    assert report.failures == 0
    assert report.worst_voltage_error == pytest.approx(0.0, abs=1e-10)


def test_error_grows_with_perturbation():
    network = feeder(5, r=0.03, x=0.05)
    bundle = build_sensitivities(network)
    load = np.array([0.0, -0.1, -0.1, -0.1, -0.1])
    errors = []
    for scale in (0.5, 1.0, 2.0):
        report = linearization_error_report(network, bundle, [(scale * load, 0.3 * scale * load)])
        errors.append(report.worst_voltage_error)
    assert errors[0] < errors[1] < errors[2]


def test_warm_point_handles_ten_percent_load_noise():
    network = feeder(5, r=0.03, x=0.05)
    base_p = np.array([0.0, -0.1, -0.15, -0.1, -0.12])
    base_q = 0.3 * base_p
    point = solve_ac_powerflow(network, base_p, base_q)
    bundle = build_sensitivities(network, point)
    rng = np.random.default_rng(7)
    samples = []
    for _ in range(20):
        noise = 1.0 + rng.uniform(-0.1, 0.1, size=5)
        samples.append((base_p * noise, base_q * noise))
    report = linearization_error_report(network, bundle, samples)
    assert report.failures == 0
    assert report.worst_voltage_error <= 0.01
