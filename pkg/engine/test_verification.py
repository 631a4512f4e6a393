"""
Monte-Carlo verification, disturbance presets and frequency reports
"""
import numpy as np
import pytest

from models.schemas import BoundaryDispatch, DispatchResult, PeriodDispatch, RunMode, UnitDispatch
from services.dispatch import build_artifacts, solve_centralized, solve_ifc
from services.frequency import aggregate_dispatch, check_indices, compute_indices, fit_case_margin
from services.uncertainty import case_bounds, fresh_seed, sample, worst_case_rhs
from services.verification import (
    allocate_regulation,
    allocation_shares,
    boundary_response,
    frequency_report,
    net_load,
    preset_components,
    preset_disturbance,
    realize_period,
    verify_dispatch,
)


@pytest.fixture
def small_artifacts(small_case):
    return build_artifacts(small_case, 20, 5, margin=fit_case_margin(small_case, 2, 4))


def empty_result(h: float = 0.0, d: float = 0.0) -> DispatchResult:
    return DispatchResult(
        mode=RunMode.CENTRALIZED, case_name="synthetic", objective=0.0,
        periods=[PeriodDispatch(period=0, ibr_h_total=h, ibr_d_total=d)],
    )


def test_net_load_subtracts_the_renewable_forecast(small_case):
    assert net_load(small_case, "tps", 0) == pytest.approx(0.1)
    assert net_load(small_case, "adn1", 0) == pytest.approx(0.05)


@pytest.mark.parametrize("case_id, expected", [(1, 0.045), (2, -0.015), (3, 0.015), (4, -0.045)])
def test_presets_default_to_thirty_percent_of_net_load(small_case, case_id, expected):
    assert preset_disturbance(small_case, case_id) == pytest.approx(expected)


@pytest.mark.parametrize("case_id, expected", [(1, 0.025), (2, -0.015), (3, 0.015), (4, -0.025)])
def test_presets_can_use_the_error_supports(small_case, case_id, expected):
    # +-10 % of 20 MW and 5 MW
    assert preset_disturbance(small_case, case_id, fraction=None) == pytest.approx(expected)


def test_preset_components_are_signed_per_region(small_case):
    components = preset_components(small_case, 3)
    assert components == pytest.approx({"tps": 0.03, "adn1": -0.015})
    assert sum(components.values()) == pytest.approx(preset_disturbance(small_case, 3))


def test_preset_fraction_of_net_load(small_case):
    assert preset_disturbance(small_case, 2, fraction=0.1) == pytest.approx(-0.01 + 0.005)


def test_unknown_preset(small_case):
    with pytest.raises(ValueError):
        preset_disturbance(small_case, 5)


def test_no_disturbance_passes_everything(small_case):
    report = frequency_report(small_case, empty_result(), 0.0)
    assert report.ok
    assert report.rocof == 0.0 and report.nadir == 0.0 and report.qss == 0.0


def test_ibr_support_softens_the_response(small_case):
    plain = frequency_report(small_case, empty_result(), 0.02)
    supported = frequency_report(small_case, empty_result(3.0, 4.0), 0.02)
    assert abs(supported.rocof) < abs(plain.rocof)
    assert abs(supported.qss) < abs(plain.qss)
    assert abs(supported.nadir) < abs(plain.nadir)
    assert supported.h_total == pytest.approx(plain.h_total + 3.0)


def test_disturbance_outside_the_margin_domain(small_case):
    margin = fit_case_margin(small_case, 2, 4)
    inside = frequency_report(small_case, empty_result(), 0.0, margin=margin)
    outside = frequency_report(small_case, empty_result(), 1e3, margin=margin)
    assert inside.within_margin_domain
    assert not outside.within_margin_domain


def test_centralized_dispatch_keeps_voltages_when_reserves_suffice(small_case, small_artifacts):
    result = solve_centralized(small_artifacts)
    fresh = sample(small_case.uncertainty, 200, fresh_seed(5), small_case.horizon)
    report, table = verify_dispatch(small_case, result, fresh)
    assert report.scenarios == 200
    assert len(table) == 200 * small_case.horizon
    assert set(table.columns) >= {"scenario", "period", "v_min", "v_max", "voltage_violation", "sfr_shortfall"}
    assert report.v_min <= report.v_max
    assert report.boundary_mismatch == pytest.approx(0.0, abs=1e-6)
    # exact voltage rows hold whenever the scheduled SFR reserve covers the disturbance
    covered = table[~table["sfr_shortfall"]]
    assert not covered["voltage_violation"].any()
    for rate in (report.line_violation_rate, report.ibr_violation_rate, report.sfr_violation_rate):
        assert 0.0 <= rate <= 1.0


def test_centralized_dispatch_meets_rocof_and_qss(small_case, small_artifacts):
    result = solve_centralized(small_artifacts)
    report = frequency_report(small_case, result, preset_disturbance(small_case, 1))
    assert report.passed["rocof"]
    assert report.passed["qss"]


def test_independent_dispatch_has_no_regulation_exchange(small_case, small_artifacts):
    result = solve_ifc(small_artifacts)
    fresh = sample(small_case.uncertainty, 50, fresh_seed(5), small_case.horizon)
    realized = realize_period(small_case, result, fresh, 0)
    assert not realized.dp[1].any()


def test_ac_check_reports_voltages(small_case, small_artifacts):
    result = solve_centralized(small_artifacts)
    fresh = sample(small_case.uncertainty, 10, fresh_seed(5), small_case.horizon)
    report, _ = verify_dispatch(small_case, result, fresh, ac=True)
    assert report.ac_checked
    assert report.ac_v_min is not None
    assert report.ac_v_min <= report.ac_v_max


def reserved_result(mode: RunMode = RunMode.CENTRALIZED) -> DispatchResult:
    units = [
        UnitDispatch(region="tps", unit="g1", kind="thermal", p=0.1, r_up=0.06, r_dn=0.01),
        UnitDispatch(region="tps", unit="wf", kind="dwf", h=1.0, d=1.0),
        UnitDispatch(region="adn1", unit="dg", kind="thermal", p=0.02, r_up=0.02, r_dn=0.03),
        UnitDispatch(region="adn1", unit="es", kind="storage", h=3.0, d=1.0),
    ]
    period = PeriodDispatch(period=0, units=units, boundaries=[BoundaryDispatch(adn_id=1, p_tps=0.05, q_tps=0.0)])
    return DispatchResult(mode=mode, case_name="small", objective=0.0, periods=[period])


def test_coordinated_regulation_follows_the_reserve_shares():
    period = reserved_result().period(0)
    zeta = {"tps": np.array([0.02, 0.2]), "adn1": np.array([0.01, 0.0])}
    deployment, shortfall = allocate_regulation(period, zeta, coordinated=True)
    assert deployment["tps"][0] == pytest.approx(0.0225)
    assert deployment["adn1"][0] == pytest.approx(0.0075)
    assert list(shortfall) == [False, True]
    assert deployment["tps"][1] == pytest.approx(0.06)


def test_independent_regulation_stays_inside_each_region():
    period = reserved_result().period(0)
    zeta = {"tps": np.array([0.02]), "adn1": np.array([0.03])}
    deployment, shortfall = allocate_regulation(period, zeta, coordinated=False)
    assert deployment["tps"][0] == pytest.approx(0.02)
    assert deployment["adn1"][0] == pytest.approx(0.02)
    assert shortfall[0]


def test_allocation_shares_of_the_distribution_side():
    shares = allocation_shares(reserved_result())
    assert shares == pytest.approx({"h": 0.75, "d": 0.5, "r_up": 0.25, "r_dn": 0.75})
    assert allocation_shares(empty_result()) == {"h": 0.0, "d": 0.0, "r_up": 0.0, "r_dn": 0.0}


def test_boundary_power_moves_with_the_regulation(small_case):
    frame = boundary_response(small_case, reserved_result(), case_ids=(1,))
    row = frame.iloc[0]
    # 0.045 p.u. shared 3:1, the ADN covers 0.01125 of its own 0.015
    assert row["regulation"] == pytest.approx(-0.00375)
    assert row["actual_p"] == pytest.approx(0.05375)
    assert row["capacity"] == pytest.approx(0.3)
    assert not row["sfr_shortfall"]


def test_independent_boundary_power_stays_scheduled(small_case):
    frame = boundary_response(small_case, reserved_result(RunMode.IFC))
    assert sorted(frame["case_id"]) == [1, 2, 3, 4]
    assert (frame["regulation"] == 0.0).all()
    assert list(frame["actual_p"]) == list(frame["base_p"])


def test_scarce_thermal_reserve_breaks_only_the_independent_nadir(scarce_case):
    artifacts = build_artifacts(scarce_case, 20, 3, margin=fit_case_margin(scarce_case))
    disturbance = preset_disturbance(scarce_case, 1)
    assert disturbance == pytest.approx(0.225)
    ifc = frequency_report(scarce_case, solve_ifc(artifacts), disturbance)
    cfc = frequency_report(scarce_case, solve_centralized(artifacts), disturbance)
    assert not ifc.passed["nadir"]
    assert all(cfc.passed.values())
    assert abs(cfc.nadir) < abs(ifc.nadir)


@pytest.fixture(scope="module")
def demo_dispatch(demo_case):
    artifacts = build_artifacts(demo_case, 50, 42)
    return artifacts, solve_centralized(artifacts, audit=10_000)


def test_demo_dispatch_holds_every_index_at_the_worst_case(demo_case, demo_dispatch):
    _, result = demo_dispatch
    worst = worst_case_rhs(case_bounds(demo_case))
    assert worst > 0
    for period in result.periods:
        params = aggregate_dispatch(demo_case, period.ibr_h_total, period.ibr_d_total)
        for disturbance in (worst, -worst):
            passed = check_indices(compute_indices(params, disturbance), demo_case.frequency, tol=1e-3)
            assert all(passed.values()), (period.period, disturbance, passed)


def test_coordinated_voltages_hold_where_the_independent_adns_do_not(demo_case, demo_dispatch):
    artifacts, result = demo_dispatch
    fresh = sample(demo_case.uncertainty, 1000, fresh_seed(42), demo_case.horizon)
    coordinated, _ = verify_dispatch(demo_case, result, fresh)
    independent, _ = verify_dispatch(demo_case, solve_ifc(artifacts), fresh)
    assert coordinated.scenarios == 1000
    assert coordinated.voltage_violations == 0
    assert coordinated.boundary_mismatch == pytest.approx(0.0, abs=1e-6)
    assert independent.voltage_violations >= 1
    assert independent.boundary_mismatch > 1e-6


def test_demo_chance_constraints_on_fresh_scenarios(demo_dispatch):
    _, result = demo_dispatch
    blocks = result.audit.blocks
    assert blocks
    for block in blocks:
        assert block.fresh_scenarios == 10_000
        assert block.training_rate <= block.delta + 1e-12
        if block.robust:
            assert block.fresh_rate == 0.0
        else:
            assert block.indicators_used <= block.budget
