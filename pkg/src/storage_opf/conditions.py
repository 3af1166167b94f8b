"""Exactness certificates for the storage complementarity relaxation.

Given a converged relaxed solve, this module evaluates the price thresholds
that decide whether dropping the per-(storage, period) complementarity
constraint was harmless, renders verdicts for the two threshold conditions
(called C1 and C2 here) and six earlier conditions from the literature
(C3..C8), re-checks the storage stationarity rows of the KKT system as
runtime identities, and verifies the inclusion relations that order all
eight conditions.

Conventions. All prices live on the solver's internal scale, $ per unit of
per-unit power over one interval; `ThresholdSet.price_scale` converts them
to $/MWh for reporting. A condition verdict is three-valued so that a slot
with no storage, or a clause that quantifies over multipliers of a solve
that did not converge, is reported as inapplicable rather than vacuously
true.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .formulation import ConstraintKind, storage_objective_gradients
from .network import NetworkCase
from .ipm import DualRecord, SolutionPoint

__all__ = [
    "Verdict",
    "ThresholdSet",
    "IdentityResiduals",
    "InclusionChecks",
    "ConditionReport",
    "compute_thresholds",
    "check_c1_c2",
    "check_prior_conditions",
    "verify_stationarity_identities",
    "verify_inclusions",
    "build_report",
    "report_to_csv",
    "STRICTNESS_MARGIN",
    "ACTIVE_TOLERANCE",
    "IDENTITY_TOLERANCE",
]

# strict inequalities are tested with this much clearance; non-strict ones
# are allowed to miss by the same amount in the other direction
STRICTNESS_MARGIN = 1e-9
# a multiplier this small counts as zero (the "capacity rows inactive" test)
ACTIVE_TOLERANCE = 1e-7
# stationarity identities re-evaluated from the duals must close to this
IDENTITY_TOLERANCE = 1e-6

CONDITION_NAMES = ("C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8")


class Verdict(Enum):
    HOLDS = "holds"
    FAILS = "fails"
    INAPPLICABLE = "inapplicable"


def _verdicts(mask: np.ndarray) -> np.ndarray:
    out = np.empty(mask.shape, dtype=object)
    out[mask] = Verdict.HOLDS
    out[~mask] = Verdict.FAILS
    return out


@dataclass
class ThresholdSet:
    """Per-(storage, period) price thresholds and the observed LMP.

    lambda_p is the active-balance multiplier at the storage's bus. c1 is the
    dual-dependent threshold, c2 the dual-free one (c1 <= c2 always), and
    c3 = c4 = -grad_ch are the thresholds the earlier conditions compare
    against. gamma is the discounted shadow value of stored energy implied by
    the SOC-window multipliers plus the terminal-equality dual; it is
    diagnostic only, no verdict reads it.
    """
    lambda_p: np.ndarray   # (ns, T)
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    c4: np.ndarray
    grad_ch: np.ndarray
    grad_dc: np.ndarray
    gamma: np.ndarray
    eta_ch: np.ndarray     # (ns,) efficiencies, carried for clause evaluation
    eta_dc: np.ndarray
    price_scale: float = 1.0   # multiply rows by this for $/MWh


@dataclass
class IdentityResiduals:
    """Stationarity rows for the storage powers, re-evaluated from the duals.

    charge_row and discharge_row are the absolute residuals of the two
    first-order rows; lmp_reconstruction is |lambda_p - (c1 + lower-bound
    multiplier combination)|, the closed-form way the LMP is pinned down by
    the other duals. All on the internal price scale.
    """
    charge_row: np.ndarray        # (ns, T)
    discharge_row: np.ndarray
    lmp_reconstruction: np.ndarray

    def max_residual(self) -> float:
        parts = [self.charge_row, self.discharge_row, self.lmp_reconstruction]
        return max((float(np.max(p)) if p.size else 0.0) for p in parts)


@dataclass
class InclusionChecks:
    """Outcome of the threshold- and verdict-level inclusion tests.

    Each violation is one human-readable string naming the slot; an empty
    list means every applicable implication held. checked counts individual
    implications evaluated.
    """
    violations: list
    checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def _ess_multipliers(duals: DualRecord):
    """The eight inequality multiplier families of the storage rows."""
    K = ConstraintKind
    return {
        "ch_lo": duals.ineq_matrix(K.CH_RANGE, "lo"),
        "ch_hi": duals.ineq_matrix(K.CH_RANGE, "hi"),
        "dc_lo": duals.ineq_matrix(K.DC_RANGE, "lo"),
        "dc_hi": duals.ineq_matrix(K.DC_RANGE, "hi"),
        "cap_dc": duals.ineq_matrix(K.CIRCLE_DC, None),
        "cap_ch": duals.ineq_matrix(K.CIRCLE_CH, None),
        "soc_lo": duals.ineq_matrix(K.SOC_RANGE, "lo"),
        "soc_hi": duals.ineq_matrix(K.SOC_RANGE, "hi"),
        "cut": duals.ineq_matrix(K.RELAX_CUT, None),
    }


def _gamma(case: NetworkCase, soc_lo: np.ndarray, soc_hi: np.ndarray,
           nu_terminal: np.ndarray) -> np.ndarray:
    """Discounted sum of future SOC-window multiplier gaps, per (n, t).

    The terminal stored-energy equality acts on the same state as the last
    SOC window, so its dual rides along with the same decay weight.
    """
    ns = len(case.storages)
    T = case.n_periods
    out = np.zeros((ns, T))
    for n, s in enumerate(case.storages):
        r = 1.0 - s.self_discharge
        diff = soc_hi[n] - soc_lo[n]
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = diff[t] + r * acc
            out[n, t] = acc
        out[n, :] += nu_terminal[n] * r ** (T - 1 - np.arange(T))
    return out


def compute_thresholds(case: NetworkCase, solution: SolutionPoint,
                       duals: DualRecord) -> ThresholdSet:
    """Evaluate the exactness price thresholds at a relaxed solve."""
    ns = len(case.storages)
    T = case.n_periods
    bi = case.bus_index
    lmp = duals.lmp()

    eta_ch = np.array([s.eta_ch for s in case.storages])
    eta_dc = np.array([s.eta_dc for s in case.storages])
    den = 1.0 / eta_dc - eta_ch
    if np.any(np.abs(den) < 1e-12):
        bad = int(np.argmin(np.abs(den)))
        raise ValueError(
            f"storage {bad}: 1/eta_dc - eta_ch is numerically zero, "
            "price thresholds are undefined")

    m = _ess_multipliers(duals)
    grad_ch, grad_dc = storage_objective_gradients(case)

    lambda_p = np.zeros((ns, T))
    for n, s in enumerate(case.storages):
        lambda_p[n] = lmp[bi(s.bus)]

    p_ch_max = np.array([s.p_ch_max for s in case.storages])[:, None]
    p_dc_max = np.array([s.p_dc_max for s in case.storages])[:, None]
    ech = eta_ch[:, None]
    edc = eta_dc[:, None]
    d = den[:, None]

    c2 = -(grad_ch / edc + grad_dc * ech) / d
    correction = ((m["ch_hi"] + 2.0 * m["cap_ch"] * solution.p_ch
                   + m["cut"] / p_ch_max) / edc
                  + (m["dc_hi"] + 2.0 * m["cap_dc"] * solution.p_dc
                     + m["cut"] / p_dc_max) * ech) / d
    c1 = c2 - correction
    c3 = -grad_ch.copy()

    gamma = _gamma(case, m["soc_lo"], m["soc_hi"], duals.soc_terminal())

    dt = case.time_grid.interval_hours
    return ThresholdSet(
        lambda_p=lambda_p, c1=c1, c2=c2, c3=c3, c4=c3.copy(),
        grad_ch=grad_ch, grad_dc=grad_dc, gamma=gamma,
        eta_ch=eta_ch, eta_dc=eta_dc,
        price_scale=1.0 / (case.base_mva * dt),
    )


# ---------------------------------------------------------------------------
# verdicts

def check_c1_c2(thresholds: ThresholdSet) -> dict:
    """Strict threshold tests: the LMP must clear c1 (and c2) outright.

    Comparisons run on the reporting price scale, so the margins mean the
    same thing ($/MWh) on every case regardless of its power base.
    """
    ts = thresholds
    k = ts.price_scale
    return {
        "C1": _verdicts((ts.lambda_p - ts.c1) * k > STRICTNESS_MARGIN),
        "C2": _verdicts((ts.lambda_p - ts.c2) * k > STRICTNESS_MARGIN),
    }


def _prior_verdicts(ts: ThresholdSet, lam_s1: np.ndarray, lam_s2: np.ndarray,
                    converged: bool) -> dict:
    """Clause-for-clause evaluation of the six earlier conditions."""
    m = STRICTNESS_MARGIN
    k = ts.price_scale
    lp = ts.lambda_p * k
    gch = ts.grad_ch * k
    gdc = ts.grad_dc * k
    ech = ts.eta_ch[:, None]
    edc = ts.eta_dc[:, None]
    gsum = gch + gdc

    c3 = (gsum > m) & (lp >= ts.c3 * k - m)
    c4 = (gsum >= -m) & (lp - ts.c4 * k > m)
    c5 = (gch / edc + gdc * ech > m) & (lp >= -m)
    c6 = ((gch >= -m) & (gdc >= -m) & (gsum > m) & (lp >= -m))
    c8 = (np.abs(gch) <= m) & (gdc > m) & (lp > m)

    out = {"C3": _verdicts(c3), "C4": _verdicts(c4), "C5": _verdicts(c5),
           "C6": _verdicts(c6)}
    if converged:
        c7 = ((lp >= -m) & (lam_s1 * k <= ACTIVE_TOLERANCE)
              & (lam_s2 * k <= ACTIVE_TOLERANCE))
        out["C7"] = _verdicts(c7)
    else:
        # the capacity-rows-inactive clause quantifies over multipliers,
        # which are meaningless without convergence
        out["C7"] = np.full(lp.shape, Verdict.INAPPLICABLE, dtype=object)
    out["C8"] = _verdicts(c8)
    return out


def check_prior_conditions(case: NetworkCase, solution: SolutionPoint,
                           duals: DualRecord, thresholds: ThresholdSet,
                           converged: bool = True) -> dict:
    """Verdicts for the six pre-existing exactness conditions (C3..C8)."""
    K = ConstraintKind
    lam_s1 = duals.ineq_matrix(K.CIRCLE_DC, None)
    lam_s2 = duals.ineq_matrix(K.CIRCLE_CH, None)
    return _prior_verdicts(thresholds, lam_s1, lam_s2, converged)


# ---------------------------------------------------------------------------
# runtime identities

def verify_stationarity_identities(case: NetworkCase, solution: SolutionPoint,
                                   duals: DualRecord) -> IdentityResiduals:
    """Re-evaluate the storage stationarity rows from the exposed duals.

    At a converged solve all three residual families close to roughly the
    solver tolerance; a systematic gap means a multiplier is wired to the
    wrong row somewhere, which is exactly what this check exists to catch.
    """
    ns = len(case.storages)
    T = case.n_periods
    if ns == 0:
        empty = np.zeros((0, T))
        return IdentityResiduals(empty, empty.copy(), empty.copy())

    ts = compute_thresholds(case, solution, duals)
    m = _ess_multipliers(duals)
    dt = case.time_grid.interval_hours

    p_ch_max = np.array([s.p_ch_max for s in case.storages])[:, None]
    p_dc_max = np.array([s.p_dc_max for s in case.storages])[:, None]
    ech = ts.eta_ch[:, None]
    edc = ts.eta_dc[:, None]

    charge = (ts.grad_ch + ts.lambda_p - m["ch_lo"] + m["ch_hi"]
              + m["cut"] / p_ch_max + 2.0 * m["cap_ch"] * solution.p_ch
              + ech * ts.gamma * dt)
    discharge = (ts.grad_dc - ts.lambda_p - m["dc_lo"] + m["dc_hi"]
                 + m["cut"] / p_dc_max + 2.0 * m["cap_dc"] * solution.p_dc
                 - ts.gamma * dt / edc)
    rec = ts.c1 + (m["ch_lo"] / edc + m["dc_lo"] * ech) / (1.0 / edc - ech)
    return IdentityResiduals(
        charge_row=np.abs(charge),
        discharge_row=np.abs(discharge),
        lmp_reconstruction=np.abs(ts.lambda_p - rec),
    )


# ---------------------------------------------------------------------------
# inclusion relations

def verify_inclusions(thresholds: ThresholdSet, verdicts: dict) -> InclusionChecks:
    """Check the containment order among the eight conditions.

    Threshold level: c1 <= c2 everywhere; where a premise clause holds, the
    corresponding threshold comparison against c2 must hold too. Verdict
    level: every prior condition implies C2, C2 implies C1, and the two
    strict chains among the priors. Any violation is an implementation bug,
    not a property of the case.
    """
    ts = thresholds
    tol = STRICTNESS_MARGIN
    violations: list = []
    checked = 0
    ns, T = ts.lambda_p.shape
    k = ts.price_scale
    gch, gdc = ts.grad_ch * k, ts.grad_dc * k
    c1, c2, c3, c4 = ts.c1 * k, ts.c2 * k, ts.c3 * k, ts.c4 * k
    gsum = gch + gdc
    ech = ts.eta_ch[:, None]
    edc = ts.eta_dc[:, None]

    def slot_fail(tag, mask):
        nonlocal checked
        checked += int(mask.size)
        for n, t in zip(*np.nonzero(mask)):
            violations.append(f"{tag} at storage {n}, period {t}")

    # threshold ordering
    slot_fail("c1 > c2", c1 > c2 + tol)
    # prior-condition thresholds against c2, under each premise clause
    slot_fail("premise grad sum > 0 but c3 <= c2",
              (gsum > tol) & ~(c3 > c2 - tol))
    slot_fail("premise grad sum >= 0 but c4 < c2",
              (gsum >= -tol) & ~(c4 >= c2 - tol))
    slot_fail("premise weighted grad sum > 0 but c2 >= 0",
              (gch / edc + gdc * ech > tol) & ~(c2 < tol))

    # verdict-level implications
    def implies(name_a, name_b):
        nonlocal checked
        va, vb = verdicts.get(name_a), verdicts.get(name_b)
        if va is None or vb is None:
            return
        for n in range(ns):
            for t in range(T):
                if va[n, t] == Verdict.HOLDS:
                    checked += 1
                    if vb[n, t] == Verdict.FAILS:
                        violations.append(
                            f"{name_a} holds but {name_b} fails at "
                            f"storage {n}, period {t}")

    implies("C2", "C1")
    for k in ("C3", "C4", "C5", "C6", "C7", "C8"):
        implies(k, "C2")
    implies("C6", "C5")
    implies("C8", "C6")
    return InclusionChecks(violations=violations, checked=checked)


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class ConditionReport:
    thresholds: ThresholdSet
    verdicts: dict                  # name -> (ns, T) array of Verdict
    scd: np.ndarray                 # (ns, T) charge*discharge products, p.u.^2
    identities: IdentityResiduals
    inclusions: InclusionChecks
    converged: bool = True

    def all_slots(self, name: str) -> Verdict:
        """Fold one condition's verdicts over every (storage, period)."""
        v = self.verdicts[name]
        if v.size == 0:
            return Verdict.INAPPLICABLE
        if any(x == Verdict.FAILS for x in v.flat):
            return Verdict.FAILS
        if any(x == Verdict.INAPPLICABLE for x in v.flat):
            return Verdict.INAPPLICABLE
        return Verdict.HOLDS

    def summary(self) -> dict:
        scd_max = float(np.max(self.scd)) if self.scd.size else 0.0
        return {
            "converged": self.converged,
            "conditions": {k: self.all_slots(k).value for k in CONDITION_NAMES},
            "scd_max": scd_max,
            "identity_max_residual": self.identities.max_residual(),
            "inclusion_checks": self.inclusions.checked,
            "inclusion_violations": list(self.inclusions.violations),
        }


def build_report(case: NetworkCase, solution: SolutionPoint, duals: DualRecord,
                 converged: bool = True) -> ConditionReport:
    thresholds = compute_thresholds(case, solution, duals)
    verdicts = check_c1_c2(thresholds)
    verdicts.update(check_prior_conditions(case, solution, duals, thresholds,
                                           converged=converged))
    identities = verify_stationarity_identities(case, solution, duals)
    inclusions = verify_inclusions(thresholds, verdicts)
    return ConditionReport(thresholds=thresholds, verdicts=verdicts,
                           scd=solution.scd(), identities=identities,
                           inclusions=inclusions, converged=converged)


def report_to_csv(report: ConditionReport) -> str:
    """One row per (storage, period); prices in $/MWh."""
    ts = report.thresholds
    k = ts.price_scale
    lines = ["n,t,lmp,c1,c2,c3,grad_ch,grad_dc,scd,C1,C2,C3,C4,C5,C6,C7,C8"]
    ns, T = ts.lambda_p.shape
    for n in range(ns):
        for t in range(T):
            nums = [ts.lambda_p[n, t] * k, ts.c1[n, t] * k, ts.c2[n, t] * k,
                    ts.c3[n, t] * k, ts.grad_ch[n, t] * k, ts.grad_dc[n, t] * k,
                    report.scd[n, t]]
            cells = [str(n), str(t)] + [f"{v:.10g}" for v in nums]
            cells += [report.verdicts[name][n, t].value for name in CONDITION_NAMES]
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
