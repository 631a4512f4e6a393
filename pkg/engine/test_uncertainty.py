"""
Scenario sampling, quantiles and disturbance bounds
"""
import numpy as np
import pytest

from models.case import ForecastErrorSpec, ForecastSource, SourceKind
from services.uncertainty import (
    DisturbanceBounds,
    boundary_envelope,
    case_bounds,
    disturbance_bounds,
    empirical_quantile,
    export_scenarios_csv,
    fresh_seed,
    import_scenarios_csv,
    renewable_outputs,
    sample,
    worst_case_rhs,
)

SPEC = ForecastErrorSpec(sources=[
    ForecastSource(id="tps.d2", kind=SourceKind.DEMAND, region="tps", target="2", lo=-0.02, hi=0.02),
    ForecastSource(id="tps.wf", kind=SourceKind.DWF, region="tps", target="wf", lo=-0.01, hi=0.01),
    ForecastSource(id="adn1.d2", kind=SourceKind.DEMAND, region="adn1", target="2", lo=-0.01, hi=0.03,
                   alpha=2.0, beta=6.0),
])


def test_quantile_order_statistic():
    samples = [2, -1, 0, -2, 1]
    assert empirical_quantile(samples, 0.2) == 1.0
    assert empirical_quantile(samples, 0.2, side="lower") == -1.0


def test_quantile_at_half_level():
    samples = [-3, -2, -1, 1, 2, 3]
    assert empirical_quantile(samples, 0.5) == -1.0
    assert empirical_quantile(samples, 0.5, side="lower") == 1.0


@pytest.mark.parametrize("level", [0.0, 0.6, -0.1])
def test_quantile_rejects_levels(level):
    with pytest.raises(ValueError):
        empirical_quantile([1.0, 2.0], level)


def test_quantile_needs_samples():
    with pytest.raises(ValueError):
        empirical_quantile([], 0.1)


def test_sampling_is_reproducible():
    a = sample(SPEC, 50, seed=11, horizon=2)
    b = sample(SPEC, 50, seed=11, horizon=2)
    c = sample(SPEC, 50, seed=12, horizon=2)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert not np.allclose(a.draws, c.draws)
    assert a.columns == ["tps.d2@0", "tps.wf@0", "adn1.d2@0", "tps.d2@1", "tps.wf@1", "adn1.d2@1"]


def test_smaller_draws_are_a_prefix():
    big = sample(SPEC, 40, seed=3)
    small = sample(SPEC, 10, seed=3)
    np.testing.assert_array_equal(big.draws[:10], small.draws)
    np.testing.assert_array_equal(big.subset(10).draws, small.draws)


def test_draws_are_centered_and_inside_the_support():
    scenarios = sample(SPEC, 20000, seed=5)
    for source in SPEC.sources:
        column = scenarios.column(source.id, 0)
        lo, hi = source.centered_support
        assert column.min() >= lo - 1e-12
        assert column.max() <= hi + 1e-12
        assert abs(column.mean()) < 0.01 * (source.hi - source.lo)


def test_skewed_beta_shift():
    skewed = SPEC.sources[2]
    assert skewed.mean_shift == pytest.approx(-0.01 + 0.04 * 0.25)
    assert skewed.centered_support == pytest.approx((-0.01, 0.03 - 0.0))


def test_fresh_stream_is_disjoint():
    assert fresh_seed(42) == fresh_seed(42)
    assert fresh_seed(42) != 42
    training = sample(SPEC, 20, 42)
    fresh = sample(SPEC, 20, fresh_seed(42))
    assert not np.allclose(training.draws, fresh.draws)


def test_need_at_least_one_scenario():
    with pytest.raises(ValueError):
        sample(SPEC, 0, 1)


def test_regional_sums_use_demand_only():
    scenarios = sample(SPEC, 30, seed=9)
    np.testing.assert_allclose(scenarios.region_sum("tps", 0), scenarios.column("tps.d2", 0))
    np.testing.assert_allclose(
        scenarios.sys_sum(0), scenarios.column("tps.d2", 0) + scenarios.column("adn1.d2", 0),
    )
    assert set(scenarios.renewable_errors("tps", 0)) == {"wf"}
    assert set(scenarios.demand_errors("adn1", 0)) == {2}


def test_disturbance_bounds_from_supports():
    bounds = disturbance_bounds(SPEC, ["tps", "adn1"])
    assert bounds["tps"] == DisturbanceBounds(zeta_max=pytest.approx(0.02), zeta_min=pytest.approx(-0.02))
    lo, hi = SPEC.sources[2].centered_support
    assert bounds["adn1"].zeta_max == pytest.approx(hi)
    assert bounds["adn1"].zeta_min == pytest.approx(lo)
    assert worst_case_rhs(bounds) == pytest.approx(max(0.02 + hi, 0.02 - lo))


def test_boundary_envelope_arithmetic():
    env = boundary_envelope(0.1, 0.05, DisturbanceBounds(zeta_max=0.02, zeta_min=-0.03))
    assert env.dp_up_max == pytest.approx(0.13)
    assert env.dp_up_min == pytest.approx(0.08)
    assert env.dp_dn_max == pytest.approx(0.07)
    assert env.dp_dn_min == pytest.approx(0.02)


def test_case_bounds_cover_every_region(small_case):
    bounds = case_bounds(small_case)
    assert set(bounds) == {"tps", "adn1"}
    assert bounds["tps"].zeta_max == pytest.approx(0.02)


def test_renewable_outputs_are_clipped(small_case):
    scenarios = sample(small_case.uncertainty, 200, seed=1)
    outputs = renewable_outputs(scenarios, small_case, "tps", 0)
    assert outputs["wf"].min() >= 0.0
    forecast = small_case.tps.forecast(small_case.tps.renewables[0], 0)
    np.testing.assert_allclose(outputs["wf"], forecast + scenarios.column("tps.wf", 0))


def test_scenario_csv_round_trip(tmp_path):
    scenarios = sample(SPEC, 25, seed=4, horizon=2)
    path = export_scenarios_csv(scenarios, tmp_path / "scenarios.csv")
    again = import_scenarios_csv(path, SPEC, 2)
    assert again.columns == scenarios.columns
    np.testing.assert_allclose(again.draws, scenarios.draws, rtol=1e-12)


def test_scenario_csv_must_match_the_case(tmp_path):
    path = export_scenarios_csv(sample(SPEC, 5, seed=4), tmp_path / "one.csv")
    with pytest.raises(ValueError):
        import_scenarios_csv(path, SPEC, 2)
