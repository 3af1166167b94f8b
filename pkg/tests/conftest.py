"""Shared fixtures: bundled cases, small hand-built case documents, and the
acceptance summary lines printed at the end of the run."""

import copy
import json

import numpy as np
import pytest

from storage_opf.network import case_from_dict

BUNDLED = ("micro3", "nine_bus", "negative_lmp")

# one pass/fail line per acceptance criterion, printed after the test table
_acceptance_lines: list[str] = []


def record_acceptance(line: str):
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in _acceptance_lines:
        terminalreporter.write_line(line)


def bundled_path(name: str) -> str:
    from importlib import resources
    return str(resources.files("storage_opf") / "cases" / f"{name}.json")


@pytest.fixture(scope="session")
def bundled_docs():
    docs = {}
    for name in BUNDLED:
        with open(bundled_path(name)) as fh:
            docs[name] = json.load(fh)
    return docs


@pytest.fixture(scope="session")
def bundled_cases(bundled_docs):
    return {name: case_from_dict(doc) for name, doc in bundled_docs.items()}


def two_bus_doc(**overrides) -> dict:
    """Minimal 2-bus, single-generator case; keyword overrides are shallow."""
    doc = {
        "name": "twobus",
        "base_mva": 100.0,
        "time": {"T": 1, "dt_hours": 1.0, "sru": 0.0, "srd": 0.0},
        "buses": [
            {"id": 1, "voltage_min": 0.9, "voltage_max": 1.1,
             "is_reference": True},
            {"id": 2, "voltage_min": 0.9, "voltage_max": 1.1},
        ],
        "branches": [
            {"from_bus": 1, "to_bus": 2, "series_conductance": 0.5,
             "series_susceptance": -5.0, "thermal_limit": 200.0},
        ],
        "generators": [
            {"bus": 1, "p_min": 0.0, "p_max": 150.0, "q_min": -80.0,
             "q_max": 80.0, "cost_quadratic": 0.02, "cost_linear": 25.0},
        ],
        "renewables": [],
        "storages": [],
        "svcs": [],
        "loads": {"2": {"p_mw": 50.0, "q_mvar": 15.0}},
    }
    doc.update(copy.deepcopy(overrides))
    return doc


def storage_doc(T=2, **storage_overrides) -> dict:
    """Two-bus case with one storage unit, for threshold and SOC tests."""
    storage = {
        "bus": 2, "eta_ch": 0.9, "eta_dc": 0.9, "self_discharge": 0.0,
        "soc_initial": 40.0, "soc_min": 10.0, "soc_max": 80.0,
        "p_ch_max": 30.0, "p_dc_max": 30.0, "apparent_capacity": 35.0,
        "charge_fee": 5.0, "discharge_fee": 15.0, "loss_penalty": 0.0,
    }
    storage.update(storage_overrides)
    doc = two_bus_doc()
    doc["name"] = "twobus_ess"
    doc["time"] = {"T": T, "dt_hours": 1.0, "sru": 0.0, "srd": 0.0}
    doc["storages"] = [storage]
    doc["loads"] = {"2": {"p_mw": [50.0] * T, "q_mvar": [15.0] * T}}
    return doc


def interior_points(problem, count, seed):
    """Seeded random points near the initial point, voltages kept positive."""
    rng = np.random.default_rng(seed)
    x0 = problem.initial_point()
    for _ in range(count):
        x = x0 + 0.05 * rng.standard_normal(len(x0))
        yield x


_BRANCHING_DOC = {
    "name": "three_bus_branching",
    "base_mva": 100.0,
    "time": {"T": 3, "dt_hours": 1.0, "sru": 5.0, "srd": 5.0},
    "buses": [
        {"id": 1, "voltage_min": 0.95, "voltage_max": 1.05,
         "is_reference": True},
        {"id": 2, "voltage_min": 0.95, "voltage_max": 1.05,
         "shunt_conductance": 0.01, "shunt_susceptance": 0.2},
        {"id": 3, "voltage_min": 0.95, "voltage_max": 1.05},
    ],
    "branches": [
        {"from_bus": 1, "to_bus": 2, "series_conductance": 1.2,
         "series_susceptance": -8.0, "charging_susceptance": 0.04,
         "thermal_limit": 120.0, "tap_ratio": 1.02, "phase_shift": 0.03},
        {"from_bus": 2, "to_bus": 3, "series_conductance": 0.8,
         "series_susceptance": -6.0, "thermal_limit": 90.0},
        {"from_bus": 1, "to_bus": 3, "series_conductance": 1.0,
         "series_susceptance": -7.0, "thermal_limit": 100.0},
    ],
    "generators": [
        {"bus": 1, "p_min": 0, "p_max": 200, "q_min": -80, "q_max": 80,
         "cost_quadratic": 0.02, "cost_linear": 18, "cost_constant": 3.0,
         "ramp_up": 80, "ramp_down": 80, "initial_output": 60},
    ],
    "renewables": [
        {"bus": 2, "forecast": [40, 50, 30], "cost_linear": -4.0,
         "curtail_penalty": 2.5, "apparent_capacity": 60},
    ],
    "storages": [
        {"bus": 3, "eta_ch": 0.9, "eta_dc": 0.92, "self_discharge": 0.01,
         "soc_initial": 30, "soc_min": 8, "soc_max": 70,
         "p_ch_max": 25, "p_dc_max": 20, "apparent_capacity": 28,
         "charge_fee": 4.0, "discharge_fee": 12.0, "loss_penalty": 0.03},
    ],
    "svcs": [{"bus": 2, "q_min": -30, "q_max": 30}],
    "loads": {
        "2": {"p_mw": [70, 90, 80], "q_mvar": [20, 28, 25]},
        "3": {"p_mw": [30, 35, 25], "q_mvar": [9, 11, 8]},
    },
}


def branching_doc() -> dict:
    """3-bus case whose storage straddles a cheap and an expensive bus; with
    negative fees the root relaxation charges and discharges at once, so the
    mode search genuinely has to branch."""
    return copy.deepcopy(_BRANCHING_DOC)


@pytest.fixture(scope="session")
def branching_results():
    """Branch-and-bound vs cold exhaustive mode enumeration, solved once.

    Returns (case, bnb_result, enumeration_objectives, elapsed_seconds); the
    enumeration covers all 2^(storages*periods) single-mode assignments.
    """
    import itertools
    import time

    from storage_opf import ipm
    from storage_opf.bnb import solve_mip
    from storage_opf.formulation import Mode, build_exact
    from storage_opf.ipm import SolveStatus
    from storage_opf.network import with_storage_fees

    case = with_storage_fees(case_from_dict(branching_doc()), -30.0, -30.0)
    slots = len(case.storages) * case.n_periods
    start = time.perf_counter()
    bnb = solve_mip(case)
    enum_objs = []
    for combo in itertools.product(
            (int(Mode.CHARGE_ONLY), int(Mode.DISCHARGE_ONLY)), repeat=slots):
        modes = np.array(combo, dtype=np.int8).reshape(
            len(case.storages), case.n_periods)
        res = ipm.solve(build_exact(case, modes))
        if res.status is SolveStatus.OPTIMAL:
            enum_objs.append(res.objective)
    elapsed = time.perf_counter() - start
    return case, bnb, enum_objs, elapsed
