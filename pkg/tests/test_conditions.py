"""Exactness certificates: threshold values, verdict boundaries, the
stationarity identities as a miswiring detector, and inclusion order."""

import dataclasses

import numpy as np
import pytest

from storage_opf import ipm
from storage_opf.conditions import (
    STRICTNESS_MARGIN,
    ConditionReport,
    ThresholdSet,
    Verdict,
    _prior_verdicts,
    build_report,
    check_c1_c2,
    compute_thresholds,
    report_to_csv,
    verify_stationarity_identities,
)
from storage_opf.formulation import ConstraintHandle, ConstraintKind, build_relaxed
from storage_opf.ipm import DualRecord, SolveStatus
from storage_opf.network import case_from_dict

from conftest import storage_doc, two_bus_doc


@pytest.fixture(scope="module")
def ess_solve():
    case = case_from_dict(storage_doc())
    res = ipm.solve(build_relaxed(case))
    assert res.status is SolveStatus.OPTIMAL
    return case, res


def _cell(v):
    return np.array([[float(v)]])


def _ts(lp, c1, c2, gch=5.0, gdc=15.0, c3=None, eta=0.9):
    c3v = -gch if c3 is None else c3
    return ThresholdSet(
        lambda_p=_cell(lp), c1=_cell(c1), c2=_cell(c2),
        c3=_cell(c3v), c4=_cell(c3v),
        grad_ch=_cell(gch), grad_dc=_cell(gdc), gamma=_cell(0.0),
        eta_ch=np.array([eta]), eta_dc=np.array([eta]), price_scale=1.0)


def test_dual_free_threshold_closed_form(ess_solve):
    # fees 5/15 $/MWh and eta 0.9/0.9, so
    # c2 = -(5/0.9 + 15*0.9) / (1/0.9 - 0.9) = -90.2631578947...
    case, res = ess_solve
    ts = compute_thresholds(case, res.solution, res.duals)
    c2_mwh = ts.c2 * ts.price_scale
    assert c2_mwh == pytest.approx(-90.2631578947368, rel=1e-6)
    assert ts.c3 * ts.price_scale == pytest.approx(-5.0, rel=1e-9)


def test_threshold_verdict_boundaries():
    c2 = -90.2631578947368
    at = check_c1_c2(_ts(lp=c2, c1=c2 - 10.0, c2=c2))
    assert at["C2"][0, 0] is Verdict.FAILS       # equality is not strict
    assert at["C1"][0, 0] is Verdict.HOLDS

    below = check_c1_c2(_ts(lp=c2 + 0.5 * STRICTNESS_MARGIN,
                            c1=c2 - 10.0, c2=c2))
    assert below["C2"][0, 0] is Verdict.FAILS    # inside the margin

    above = check_c1_c2(_ts(lp=-11.56, c1=c2 - 10.0, c2=c2))
    assert above["C2"][0, 0] is Verdict.HOLDS
    assert above["C1"][0, 0] is Verdict.HOLDS


def test_prior_condition_clauses():
    zero = np.zeros((1, 1))
    ts = _ts(lp=10.0, c1=-100.0, c2=-90.0, gch=5.0, gdc=15.0)
    v = _prior_verdicts(ts, zero, zero, converged=True)
    assert v["C3"][0, 0] is Verdict.HOLDS
    assert v["C4"][0, 0] is Verdict.HOLDS
    assert v["C5"][0, 0] is Verdict.HOLDS
    assert v["C6"][0, 0] is Verdict.HOLDS
    assert v["C7"][0, 0] is Verdict.HOLDS
    assert v["C8"][0, 0] is Verdict.FAILS        # needs grad_ch == 0

    flat = _ts(lp=10.0, c1=-1.0, c2=0.0, gch=0.0, gdc=0.0)
    v = _prior_verdicts(flat, zero, zero, converged=True)
    assert v["C3"][0, 0] is Verdict.FAILS        # grad sum not positive
    assert v["C8"][0, 0] is Verdict.FAILS

    free_dc = _ts(lp=10.0, c1=-1.0, c2=0.0, gch=0.0, gdc=15.0, c3=0.0)
    v = _prior_verdicts(free_dc, zero, zero, converged=True)
    assert v["C8"][0, 0] is Verdict.HOLDS

    busy = _prior_verdicts(ts, zero + 1.0, zero, converged=True)
    assert busy["C7"][0, 0] is Verdict.FAILS     # capacity row is active

    unconverged = _prior_verdicts(ts, zero, zero, converged=False)
    assert unconverged["C7"][0, 0] is Verdict.INAPPLICABLE


def test_identities_close_at_converged_solve(ess_solve):
    case, res = ess_solve
    ident = verify_stationarity_identities(case, res.solution, res.duals)
    assert ident.max_residual() <= 1e-6


def test_identities_flag_miswired_multiplier(ess_solve):
    # shifting one charge lower-bound multiplier must show up, at exactly
    # its own magnitude, in the charge stationarity row of that slot
    case, res = ess_solve
    handle = ConstraintHandle(ConstraintKind.CH_RANGE, 0, 0, "lo")
    lam = res.lam.copy()
    lam[res.problem.ineq_pos[handle]] += 0.1
    duals = DualRecord(res.problem, res.nu, lam)
    ident = verify_stationarity_identities(case, res.solution, duals)
    assert ident.charge_row[0, 0] == pytest.approx(0.1, abs=1e-6)
    assert float(np.max(ident.discharge_row)) <= 1e-6
    assert ident.lmp_reconstruction[0, 0] > 0.1


def test_without_storage_everything_is_inapplicable():
    case = case_from_dict(two_bus_doc())
    res = ipm.solve(build_relaxed(case))
    report = build_report(case, res.solution, res.duals)
    assert report.verdicts["C1"].size == 0
    for name in ("C1", "C2", "C7"):
        assert report.all_slots(name) is Verdict.INAPPLICABLE
    assert report.identities.max_residual() == 0.0
    assert report.summary()["scd_max"] == 0.0


def test_degenerate_efficiency_pair_is_rejected(ess_solve):
    case, res = ess_solve
    unit = dataclasses.replace(case.storages[0], eta_ch=1.0, eta_dc=1.0)
    bad = dataclasses.replace(case, storages=[unit])
    with pytest.raises(ValueError, match="numerically zero"):
        compute_thresholds(bad, res.solution, res.duals)


def test_inclusions_hold_on_bundled_cases(bundled_cases):
    for name, case in bundled_cases.items():
        res = ipm.solve(build_relaxed(case))
        assert res.status is SolveStatus.OPTIMAL, name
        report = build_report(case, res.solution, res.duals)
        assert report.inclusions.ok, (name, report.inclusions.violations)
        assert report.inclusions.checked > 0
        ts = report.thresholds
        gap = (ts.c2 - ts.c1) * ts.price_scale
        assert np.all(gap >= -STRICTNESS_MARGIN), name


def test_report_csv_layout(ess_solve):
    case, res = ess_solve
    report = build_report(case, res.solution, res.duals)
    lines = report_to_csv(report).strip().splitlines()
    assert lines[0] == ("n,t,lmp,c1,c2,c3,grad_ch,grad_dc,scd,"
                        "C1,C2,C3,C4,C5,C6,C7,C8")
    ns, T = report.thresholds.lambda_p.shape
    assert len(lines) == 1 + ns * T
    for row in lines[1:]:
        cells = row.split(",")
        assert len(cells) == 17
        assert set(cells[9:]) <= {"holds", "fails", "inapplicable"}


def test_summary_fold_tracks_worst_slot(ess_solve):
    case, res = ess_solve
    report = build_report(case, res.solution, res.duals)
    summary = report.summary()
    assert summary["converged"] is True
    assert summary["conditions"]["C2"] == "holds"
    assert summary["inclusion_violations"] == []
    assert summary["scd_max"] >= 0.0
