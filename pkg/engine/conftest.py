"""
Shared fixtures: the bundled demo case and a few hand-sized networks and cases
"""
import copy
import json
from pathlib import Path

import pytest

from config import get_settings
from models.case import BranchRecord, BusKind, BusRecord, Network
from models.schemas import Proposal, RegionReport
from services.case_loader import load_case, parse_itd_case

DATA = Path(__file__).parent / "data"
DEMO_CASE = DATA / "demo_t6d2.json"

SMALL_CASE = {
    "name": "small",
    "base_mva": 100.0,
    "dt": 0.25,
    "horizon": 1,
    "frequency": {
        "f0": 50.0,
        "h_thermal": 30.0,
        "damping": 5.0,
        "governor": {"r_g": 0.025, "f_h": 0.3, "t_r": 8.0},
    },
    "levels": {"delta_v": 0.0, "delta_line": 0.05, "delta_ibr": 0.05, "delta_sfr": 0.05},
    "tps": {
        "network": {
            "name": "tps",
            "buses": [
                {"id": 1, "kind": "slack"},
                {"id": 2, "p_demand": 20.0, "q_demand": 5.0},
            ],
            "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.01, "x": 0.05, "flow_limit": 100.0}],
        },
        "thermal": [
            {"id": "g1", "bus": 1, "p_min": 0.0, "p_max": 80.0, "q_min": -30.0, "q_max": 40.0, "ramp": 40.0,
             "cost_quadratic": 0.02, "cost_linear": 20.0, "reserve_cost_up": 4.0, "reserve_cost_down": 4.0,
             "agc_factor": 1.0, "droop_R": 0.075, "pfr_cap": 15.0}
        ],
        "renewables": [
            {"id": "wf", "bus": 2, "kind": "dwf", "forecast_max": 10.0, "q_min": -3.0, "q_max": 3.0,
             "curtail_cost": 10.0, "h_max": 5.0, "d_max": 5.0}
        ],
    },
    "adns": [
        {
            "adn_id": 1,
            "region": {
                "network": {
                    "name": "feeder",
                    "buses": [
                        {"id": 1, "kind": "slack"},
                        {"id": 2, "p_demand": 5.0, "q_demand": 1.0},
                    ],
                    "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.02, "x": 0.04, "flow_limit": 50.0}],
                },
                "thermal": [
                    {"id": "dg", "bus": 2, "p_min": 0.0, "p_max": 6.0, "q_min": -2.0, "q_max": 3.0, "ramp": 6.0,
                     "cost_linear": 35.0, "reserve_cost_up": 5.0, "reserve_cost_down": 5.0,
                     "agc_factor": 1.0, "droop_R": 0.2, "pfr_cap": 3.0}
                ],
            },
        }
    ],
    "links": [{"tps_bus": 2, "adn_id": 1, "adn_root_bus": 1, "capacity": 30.0}],
}

# thermal inertia alone cannot hold the nadir of the full disturbance; the ADN storage can
SCARCE_CASE = {
    "name": "scarce",
    "base_mva": 100.0,
    "dt": 0.25,
    "horizon": 1,
    "frequency": {
        "f0": 50.0,
        "h_thermal": 20.0,
        "damping": 5.0,
        "governor": {"r_g": 0.025, "f_h": 0.3, "t_r": 8.0},
    },
    "tps": {
        "network": {
            "name": "tps",
            "buses": [
                {"id": 1, "kind": "slack"},
                {"id": 2, "p_demand": 50.0, "q_demand": 10.0},
            ],
            "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.01, "x": 0.05, "flow_limit": 200.0}],
        },
        "thermal": [
            {"id": "g1", "bus": 1, "p_min": 0.0, "p_max": 200.0, "q_min": -50.0, "q_max": 80.0, "ramp": 200.0,
             "cost_quadratic": 0.02, "cost_linear": 20.0, "reserve_cost_up": 4.0, "reserve_cost_down": 4.0,
             "agc_factor": 1.0, "droop_R": 0.075, "pfr_cap": 15.0}
        ],
    },
    "adns": [
        {
            "adn_id": 1,
            "region": {
                "network": {
                    "name": "feeder",
                    "buses": [
                        {"id": 1, "kind": "slack"},
                        {"id": 2, "p_demand": 25.0, "q_demand": 5.0},
                    ],
                    "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.02, "x": 0.04, "flow_limit": 100.0}],
                },
                "thermal": [
                    {"id": "dg", "bus": 2, "p_min": 0.0, "p_max": 60.0, "q_min": -10.0, "q_max": 20.0, "ramp": 60.0,
                     "cost_linear": 35.0, "reserve_cost_up": 5.0, "reserve_cost_down": 5.0,
                     "agc_factor": 1.0, "droop_R": 0.2, "pfr_cap": 3.0}
                ],
                "storage": [
                    {"id": "es", "bus": 2, "p_charge_max": 50.0, "p_discharge_max": 50.0, "energy_cap": 40.0,
                     "reserve_cost_up": 1.0, "reserve_cost_down": 1.0, "h_max": 50.0, "d_max": 150.0}
                ],
            },
        }
    ],
    "links": [{"tps_bus": 2, "adn_id": 1, "adn_root_bus": 1, "capacity": 60.0}],
    "uncertainty": {
        "sources": [
            {"id": "load_t", "kind": "demand", "region": "tps", "target": "2", "lo": -5.0, "hi": 5.0},
            {"id": "load_d", "kind": "demand", "region": "adn1", "target": "2", "lo": -20.0, "hi": 20.0},
        ]
    },
}


@pytest.fixture(autouse=True)
def clear_settings_cache(monkeypatch):
    """Each test sees settings built from its own environment"""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def small_case_data():
    return copy.deepcopy(SMALL_CASE)


def build_case(data: dict, strict: bool = True):
    return parse_itd_case(json.dumps(data), strict=strict)


@pytest.fixture
def small_case(small_case_data):
    return build_case(small_case_data)


@pytest.fixture
def scarce_case():
    return build_case(copy.deepcopy(SCARCE_CASE))


@pytest.fixture(scope="session")
def demo_case():
    return load_case(DEMO_CASE)


def two_bus(x: float = 0.1, r: float = 0.0) -> Network:
    return Network(
        name="two-bus",
        buses=[BusRecord(id=1, kind=BusKind.SLACK), BusRecord(id=2)],
        branches=[BranchRecord(from_bus=1, to_bus=2, r=r, x=x)],
    )


def feeder(n_buses: int, r: float = 0.02, x: float = 0.04) -> Network:
    """Radial chain 1-2-...-n with the slack at bus 1"""
    buses = [BusRecord(id=1, kind=BusKind.SLACK)] + [BusRecord(id=i) for i in range(2, n_buses + 1)]
    branches = [BranchRecord(from_bus=i, to_bus=i + 1, r=r, x=x) for i in range(1, n_buses)]
    return Network(name=f"feeder{n_buses}", buses=buses, branches=branches)


KEY = "adn1.p@0"


class ScalarAgent:
    """Agent over one consensus entry minimizing weight * (x - target)^2 plus its consensus terms"""

    def __init__(self, name, role, target, weight=1.0, constant=False, fail_at=None, growth=None, flips=False):
        self.name = name
        self.role = role
        self.keys = [KEY]
        self.target = target
        self.weight = weight
        self.constant = constant
        self.fail_at = fail_at
        self.growth = growth
        self.flips = flips
        self.terms = []
        self.fixed = []
        self.aborts = []
        self.calls = 0

    async def start(self):
        pass

    async def solve(self, round, terms):
        self.calls += 1
        if round == self.fail_at:
            raise RuntimeError("solver crashed")
        self.terms.append(terms)
        if self.growth is not None:
            x = self.growth ** self.calls
        elif terms is None or self.constant:
            x = self.target
        else:
            w, lam, center, rho = self.weight, terms.lam[KEY], terms.ybar[KEY], terms.rho
            x = (2 * w * self.target - lam + 2 * rho * center) / (2 * w + 2 * rho)
        return Proposal(agent=self.name, values={KEY: x}, objective=self.weight * (x - self.target) ** 2)

    async def resolve_indicators(self, round, ybar, radius):
        indicators = {f"{self.name}.L@0": [round]} if self.flips else {}
        return Proposal(agent=self.name, values={KEY: ybar[KEY]}, indicators=indicators)

    async def fix(self, round, assignment):
        self.fixed.append(assignment)

    async def finish(self, round, converged):
        return RegionReport(region=self.name)

    async def abort(self, round, reason):
        self.aborts.append(reason)
