"""Case parsing, validation rules, per-unit conversion, and round-trips."""

import json

import numpy as np
import pytest

from storage_opf.network import (CaseError, case_from_dict, case_to_dict,
                                 load_case, validate, with_rg_cost,
                                 with_storage_fees)

from conftest import bundled_path, storage_doc, two_bus_doc


def test_minimal_two_bus_case():
    case = case_from_dict(two_bus_doc())
    assert case.n_buses == 2
    assert len(case.branches) == 1
    assert case.n_periods == 1
    # 50 MW on a 100 MVA base
    assert case.time_grid.load_p[1, 0] == pytest.approx(0.5)


def test_equal_efficiencies_rejected():
    doc = storage_doc(eta_ch=1.0, eta_dc=1.0)
    with pytest.raises(CaseError, match="1/eta_dc > eta_ch"):
        case_from_dict(doc)


def test_storage_on_missing_bus_names_both():
    doc = storage_doc(bus=99)
    with pytest.raises(CaseError, match=r"storage\[0\].*99"):
        case_from_dict(doc)


def test_validate_clean_case_returns_empty():
    case = load_case(bundled_path("micro3"))
    assert validate(case) == []


def test_validate_soc_initial_out_of_window():
    import dataclasses
    case = case_from_dict(storage_doc())
    bad = dataclasses.replace(case.storages[0], soc_initial=2.0)
    out = validate(dataclasses.replace(case, storages=[bad]))
    assert len(out) == 1 and out[0].field == "soc_initial"


def test_validate_disconnected_bus():
    doc = two_bus_doc()
    doc["buses"].append({"id": 3, "voltage_min": 0.9, "voltage_max": 1.1})
    with pytest.raises(CaseError, match="not connected"):
        case_from_dict(doc)


def test_malformed_file_raises(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{ not json")
    with pytest.raises(CaseError, match="parse"):
        load_case(str(p))


def test_roundtrip_bundled_cases():
    for name in ("micro3", "nine_bus", "negative_lmp"):
        case = load_case(bundled_path(name))
        again = case_from_dict(case_to_dict(case))
        assert again.n_buses == case.n_buses
        assert len(again.branches) == len(case.branches)
        np.testing.assert_allclose(again.time_grid.load_p,
                                   case.time_grid.load_p, rtol=1e-12)
        for s1, s2 in zip(case.storages, again.storages):
            np.testing.assert_allclose(s1.charge_fee, s2.charge_fee,
                                       rtol=1e-12)
            assert s1.eta_ch == pytest.approx(s2.eta_ch, rel=1e-12)
        for g1, g2 in zip(case.generators, again.generators):
            assert g1.cost_quadratic == pytest.approx(g2.cost_quadratic,
                                                      rel=1e-12)


def test_fee_override_scales_to_internal_units():
    case = case_from_dict(storage_doc())
    out = with_storage_fees(case, charge_per_mwh=-10.0, discharge_per_mwh=20.0)
    base, dt = case.base_mva, case.time_grid.interval_hours
    np.testing.assert_allclose(out.storages[0].charge_fee,
                               -10.0 * base * dt)
    np.testing.assert_allclose(out.storages[0].discharge_fee,
                               20.0 * base * dt)
    # untouched case unchanged
    np.testing.assert_allclose(case.storages[0].charge_fee, 5.0 * base * dt)


def test_rg_cost_override():
    doc = two_bus_doc()
    doc["renewables"] = [{"bus": 2, "forecast": [30.0], "cost_linear": 2.0,
                          "curtail_penalty": 0.5, "apparent_capacity": 40.0}]
    case = case_from_dict(doc)
    out = with_rg_cost(case, -100.0)
    np.testing.assert_allclose(out.renewables[0].cost_linear,
                               -100.0 * case.base_mva)


def test_loads_reference_unknown_bus():
    doc = two_bus_doc()
    doc["loads"]["7"] = {"p_mw": 1.0, "q_mvar": 0.0}
    with pytest.raises(CaseError, match="unknown bus id 7"):
        case_from_dict(doc)
