"""Multi-period storage-concerned AC-OPF as a smooth NLP.

The charge/discharge complementarity (p_ch * p_dc = 0) is never part of the
smooth problem; :func:`build_relaxed` drops it entirely and :func:`build_exact`
re-imposes a chosen on/off pattern through equality rows that pin one of the
two powers to zero. Branch-and-bound over those patterns recovers the exact
model.

Conventions
-----------
* Everything is per-unit (see network.py); angles in radians.
* Equality rows are written residual-style, c_E(x) = 0, with power balances
  negated so that the active-balance multiplier is the locational marginal
  price (d objective / d load).
* Inequalities are g(x) <= 0 with nonnegative multipliers; a lower bound
  l <= x enters as -(x - l) <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .network import NetworkCase

__all__ = [
    "ConstraintKind",
    "ConstraintHandle",
    "VariableLayout",
    "OpfProblem",
    "Mode",
    "build_layout",
    "build_relaxed",
    "build_exact",
    "soc_trajectory",
    "storage_objective_gradients",
]


class Mode(IntEnum):
    """Storage operating mode for one (unit, period) slot."""
    FREE = 0           # both powers free (relaxed)
    CHARGE_ONLY = 1    # discharge pinned to zero
    DISCHARGE_ONLY = 2  # charge pinned to zero


class ConstraintKind(Enum):
    # equalities
    ACTIVE_BALANCE = "active_balance"
    REACTIVE_BALANCE = "reactive_balance"
    ANGLE_REF = "angle_ref"
    SOC_TERMINAL = "soc_terminal"
    MODE_FIX = "mode_fix"
    # inequalities
    V_BOUND = "v_bound"
    THERMAL = "thermal"
    GEN_P = "gen_p"
    GEN_Q = "gen_q"
    RAMP = "ramp"
    RESERVE_UP = "reserve_up"
    RESERVE_DOWN = "reserve_down"
    SYSTEM_RESERVE = "system_reserve"
    RG_P = "rg_p"
    RG_CIRCLE = "rg_circle"
    SVC_Q = "svc_q"
    CH_RANGE = "ch_range"
    DC_RANGE = "dc_range"
    CIRCLE_DC = "circle_dc"
    CIRCLE_CH = "circle_ch"
    SOC_RANGE = "soc_range"
    RELAX_CUT = "relax_cut"


@dataclass(frozen=True)
class ConstraintHandle:
    """Stable identity of one constraint row.

    entity is the device/bus/branch position in its list (-1 for system-wide
    rows); period is the 0-based interval (None for whole-horizon rows); side
    disambiguates rows sharing a kind: "lo"/"hi"/"cap" for ranges,
    "up"/"down" for directional pairs, and for MODE_FIX the pinned variable
    ("ch" or "dc").
    """
    kind: ConstraintKind
    entity: int
    period: int | None
    side: str | None = None

    def __str__(self):
        bits = [self.kind.value, f"e{self.entity}"]
        if self.period is not None:
            bits.append(f"t{self.period}")
        if self.side is not None:
            bits.append(self.side)
        return ":".join(bits)


@dataclass
class VariableLayout:
    """Flat ordering of the decision vector.

    Blocks appear in a fixed order, each laid out entity-major: the flat
    index of (entity k, period t) inside a block is k*T + t.
    """
    nb: int
    ng: int
    nr: int
    ns: int
    nv: int
    T: int

    def __post_init__(self):
        T = self.T
        off = 0

        def block(count):
            nonlocal off
            idx = off + np.arange(count * T).reshape(count, T)
            off += count * T
            return idx

        self.v_idx = block(self.nb)       # voltage magnitude
        self.th_idx = block(self.nb)      # voltage angle
        self.pg_idx = block(self.ng)      # conventional active output
        self.qg_idx = block(self.ng)
        self.ru_idx = block(self.ng)      # upward reserve offer
        self.rd_idx = block(self.ng)
        self.prg_idx = block(self.nr)     # renewable active output
        self.qrg_idx = block(self.nr)
        self.pch_idx = block(self.ns)     # storage charging power
        self.pdc_idx = block(self.ns)     # storage discharging power
        self.qe_idx = block(self.ns)      # storage reactive output
        self.qsvc_idx = block(self.nv)
        self.n_vars = off


def build_layout(case: NetworkCase) -> VariableLayout:
    return VariableLayout(nb=case.n_buses, ng=len(case.generators),
                          nr=len(case.renewables), ns=len(case.storages),
                          nv=len(case.svcs), T=case.n_periods)


def _soc_coefficients(case: NetworkCase):
    """Per-storage linear maps from (p_ch, p_dc) histories to the SOC path.

    E_n(t) = keep[n,t]*E0_n + Mch[n,t,:] @ p_ch[n,:] + Mdc[n,t,:] @ p_dc[n,:]
    with the retention factor (1-delta) compounding between intervals.
    """
    T = case.n_periods
    dt = case.time_grid.interval_hours
    ns = len(case.storages)
    keep = np.zeros((ns, T))
    Mch = np.zeros((ns, T, T))
    Mdc = np.zeros((ns, T, T))
    for n, s in enumerate(case.storages):
        r = 1.0 - s.self_discharge
        for t in range(T):
            keep[n, t] = r ** (t + 1)
            for tau in range(t + 1):
                w = r ** (t - tau)
                Mch[n, t, tau] = w * s.eta_ch * dt
                Mdc[n, t, tau] = -w * dt / s.eta_dc
    return keep, Mch, Mdc


def soc_trajectory(case: NetworkCase, p_ch: np.ndarray, p_dc: np.ndarray) -> np.ndarray:
    """State of charge per (storage, period), p.u.-h, from power schedules."""
    keep, Mch, Mdc = _soc_coefficients(case)
    ns, T = p_ch.shape
    out = np.zeros((ns, T))
    for n, s in enumerate(case.storages):
        out[n] = keep[n] * s.soc_initial + Mch[n] @ p_ch[n] + Mdc[n] @ p_dc[n]
    return out


def storage_objective_gradients(case: NetworkCase):
    """Constant objective gradients w.r.t. charge and discharge power.

    Returns (grad_ch, grad_dc), each (ns, T) in $ per p.u. of power: the
    usage fee plus the conversion-loss penalty's share.
    """
    T = case.n_periods
    ns = len(case.storages)
    grad_ch = np.zeros((ns, T))
    grad_dc = np.zeros((ns, T))
    for n, s in enumerate(case.storages):
        grad_ch[n] = s.charge_fee + s.loss_penalty * (1.0 - s.eta_ch)
        grad_dc[n] = s.discharge_fee + s.loss_penalty * (1.0 / s.eta_dc - 1.0)
    return grad_ch, grad_dc


class OpfProblem:
    """Smooth NLP for one storage-mode pattern (all-FREE = relaxed model).

    The solver-facing surface is: n_vars, n_eq, n_ineq, objective, gradient,
    eq_values, eq_jacobian, ineq_values, ineq_jacobian, hessian,
    initial_point, plus the handle lists eq_handles / ineq_handles.
    """

    def __init__(self, case: NetworkCase, modes: np.ndarray | None = None):
        self.case = case
        self.layout = build_layout(case)
        T = case.n_periods
        ns = len(case.storages)
        if modes is None:
            modes = np.zeros((ns, T), dtype=int)
        modes = np.asarray(modes, dtype=int)
        if modes.shape != (ns, T):
            raise ValueError(f"modes must have shape ({ns}, {T})")
        self.modes = modes
        # A pinning equality makes the pinned variable's lower bound and the
        # joint capacity cut redundant; widening those rows leaves the feasible
        # set unchanged but keeps the active constraints linearly independent.
        self._ch_lo_wide = (modes == Mode.DISCHARGE_ONLY).astype(float)
        self._dc_lo_wide = (modes == Mode.CHARGE_ONLY).astype(float)
        self._cut_wide = (modes != Mode.FREE).astype(float)

        self._keep, self._Mch, self._Mdc = _soc_coefficients(case)
        self._grad_ch, self._grad_dc = storage_objective_gradients(case)

        # bus positions of every device, once
        bi = case.bus_index
        self._gbus = np.array([bi(g.bus) for g in case.generators], dtype=int)
        self._rbus = np.array([bi(r.bus) for r in case.renewables], dtype=int)
        self._sbus = np.array([bi(s.bus) for s in case.storages], dtype=int)
        self._vbus = np.array([bi(v.bus) for v in case.svcs], dtype=int)
        self._fbus = np.array([bi(e.from_bus) for e in case.branches], dtype=int)
        self._tbus = np.array([bi(e.to_bus) for e in case.branches], dtype=int)
        self._ref = case.reference_index()

        self._br_g = np.array([e.series_conductance for e in case.branches])
        self._br_b = np.array([e.series_susceptance for e in case.branches])
        self._br_bsh = np.array([e.series_susceptance + 0.5 * e.charging_susceptance
                                 for e in case.branches])
        self._br_tau = (np.stack([e.tap_ratio for e in case.branches])
                        if case.branches else np.zeros((0, T)))
        self._br_phi = (np.stack([e.phase_shift for e in case.branches])
                        if case.branches else np.zeros((0, T)))
        self._bus_gs = np.array([bu.shunt_conductance for bu in case.buses])
        self._bus_bs = np.array([bu.shunt_susceptance for bu in case.buses])

        self._build_handles()

    # ------------------------------------------------------------------
    # row inventory

    def _build_handles(self):
        case = self.case
        T = case.n_periods
        K = ConstraintKind
        eq: list[ConstraintHandle] = []
        for j in range(case.n_buses):
            for t in range(T):
                eq.append(ConstraintHandle(K.ACTIVE_BALANCE, j, t))
        for j in range(case.n_buses):
            for t in range(T):
                eq.append(ConstraintHandle(K.REACTIVE_BALANCE, j, t))
        for t in range(T):
            eq.append(ConstraintHandle(K.ANGLE_REF, self._ref, t))
        for n in range(len(case.storages)):
            eq.append(ConstraintHandle(K.SOC_TERMINAL, n, None))
        for n in range(len(case.storages)):
            for t in range(T):
                if self.modes[n, t] == Mode.CHARGE_ONLY:
                    eq.append(ConstraintHandle(K.MODE_FIX, n, t, "dc"))
                elif self.modes[n, t] == Mode.DISCHARGE_ONLY:
                    eq.append(ConstraintHandle(K.MODE_FIX, n, t, "ch"))

        ineq: list[ConstraintHandle] = []

        def ranges(kind, count, sides=("lo", "hi")):
            for k in range(count):
                for t in range(T):
                    for side in sides:
                        ineq.append(ConstraintHandle(kind, k, t, side))

        ranges(K.V_BOUND, case.n_buses)
        for e in range(len(case.branches)):
            for t in range(T):
                ineq.append(ConstraintHandle(K.THERMAL, e, t))
        ng = len(case.generators)
        ranges(K.GEN_P, ng)
        ranges(K.GEN_Q, ng)
        ranges(K.RAMP, ng, sides=("up", "down"))
        ranges(K.RESERVE_UP, ng, sides=("lo", "hi", "cap"))
        ranges(K.RESERVE_DOWN, ng, sides=("lo", "hi", "cap"))
        for t in range(T):
            for side in ("up", "down"):
                ineq.append(ConstraintHandle(K.SYSTEM_RESERVE, -1, t, side))
        nr = len(case.renewables)
        ranges(K.RG_P, nr)
        for r in range(nr):
            for t in range(T):
                ineq.append(ConstraintHandle(K.RG_CIRCLE, r, t))
        ranges(K.SVC_Q, len(case.svcs))
        ns = len(case.storages)
        ranges(K.CH_RANGE, ns)
        ranges(K.DC_RANGE, ns)
        for n in range(ns):
            for t in range(T):
                ineq.append(ConstraintHandle(K.CIRCLE_DC, n, t))
        for n in range(ns):
            for t in range(T):
                ineq.append(ConstraintHandle(K.CIRCLE_CH, n, t))
        ranges(K.SOC_RANGE, ns)
        for n in range(ns):
            for t in range(T):
                ineq.append(ConstraintHandle(K.RELAX_CUT, n, t))

        self.eq_handles = eq
        self.ineq_handles = ineq
        self.eq_pos = {h: i for i, h in enumerate(eq)}
        self.ineq_pos = {h: i for i, h in enumerate(ineq)}
        self.n_eq = len(eq)
        self.n_ineq = len(ineq)
        self.n_vars = self.layout.n_vars

    # ------------------------------------------------------------------
    # objective

    def objective(self, x: np.ndarray) -> float:
        case = self.case
        L = self.layout
        total = 0.0
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            total += np.sum(g.cost_quadratic * pg * pg + g.cost_linear * pg
                            + g.cost_constant)
        for k, r in enumerate(case.renewables):
            prg = x[L.prg_idx[k]]
            total += float(r.cost_linear @ prg)
            if r.curtail_penalty != 0.0:
                pos = r.forecast > 0
                dev = prg[pos] - r.forecast[pos]
                total += r.curtail_penalty * np.sum(dev * dev / r.forecast[pos])
        for n in range(len(case.storages)):
            pch = x[L.pch_idx[n]]
            pdc = x[L.pdc_idx[n]]
            total += float(self._grad_ch[n] @ pch + self._grad_dc[n] @ pdc)
        return float(total)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        case = self.case
        L = self.layout
        g_out = np.zeros(self.n_vars)
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            g_out[L.pg_idx[k]] = 2.0 * g.cost_quadratic * pg + g.cost_linear
        for k, r in enumerate(case.renewables):
            grad = r.cost_linear.copy()
            if r.curtail_penalty != 0.0:
                pos = r.forecast > 0
                prg = x[L.prg_idx[k]]
                grad[pos] += 2.0 * r.curtail_penalty * (prg[pos] - r.forecast[pos]) / r.forecast[pos]
            g_out[L.prg_idx[k]] = grad
        for n in range(len(case.storages)):
            g_out[L.pch_idx[n]] = self._grad_ch[n]
            g_out[L.pdc_idx[n]] = self._grad_dc[n]
        return g_out

    # ------------------------------------------------------------------
    # branch flows (vectorized over branches for one period)

    def _flows_t(self, x: np.ndarray, t: int):
        """Flow values and first derivatives for all branches at period t.

        Derivative rows are ordered [d/dVi, d/dVj, d/dth_i, d/dth_j]; the
        matching column indices come in the same order.
        """
        L = self.layout
        fi, ti = self._fbus, self._tbus
        V = x[L.v_idx[:, t]]
        th = x[L.th_idx[:, t]]
        g = self._br_g
        b = self._br_b
        bsh = self._br_bsh
        tau = self._br_tau[:, t]
        phi = self._br_phi[:, t]

        Vi, Vj = V[fi], V[ti]
        A = th[fi] - th[ti] - phi
        ca, sa = np.cos(A), np.sin(A)
        T1 = (g * ca + b * sa) / tau
        T2 = (g * sa - b * ca) / tau
        T3 = (g * ca - b * sa) / tau
        T4 = (g * sa + b * ca) / tau

        Pf = (g / tau**2) * Vi**2 - Vi * Vj * T1
        Qf = -(bsh / tau**2) * Vi**2 - Vi * Vj * T2
        Pt = g * Vj**2 - Vi * Vj * T3
        Qt = -bsh * Vj**2 + Vi * Vj * T4

        VV = Vi * Vj
        dPf = np.stack([2.0 * (g / tau**2) * Vi - Vj * T1, -Vi * T1, VV * T2, -VV * T2])
        dQf = np.stack([-2.0 * (bsh / tau**2) * Vi - Vj * T2, -Vi * T2, -VV * T1, VV * T1])
        dPt = np.stack([-Vj * T3, 2.0 * g * Vj - Vi * T3, VV * T4, -VV * T4])
        dQt = np.stack([Vj * T4, -2.0 * bsh * Vj + Vi * T4, VV * T3, -VV * T3])

        cols = np.stack([L.v_idx[fi, t], L.v_idx[ti, t],
                         L.th_idx[fi, t], L.th_idx[ti, t]])
        return dict(Vi=Vi, Vj=Vj, T1=T1, T2=T2, T3=T3, T4=T4,
                    g=g, bsh=bsh, tau=tau,
                    Pf=Pf, Qf=Qf, Pt=Pt, Qt=Qt,
                    dPf=dPf, dQf=dQf, dPt=dPt, dQt=dQt, cols=cols)

    def _flow_hessians(self, fl):
        """Second derivatives of the four flow quantities, (nl, 4, 4) each,
        in the [Vi, Vj, th_i, th_j] ordering of _flows_t."""
        Vi, Vj = fl["Vi"], fl["Vj"]
        T1, T2, T3, T4 = fl["T1"], fl["T2"], fl["T3"], fl["T4"]
        g, bsh, tau = fl["g"], fl["bsh"], fl["tau"]
        nl = Vi.shape[0]
        VV = Vi * Vj

        def sym(d2vv, dVidVj, dVidthi, dVjdthi, d2th):
            # blocks: d2vv = (HViVi, HVjVj); dVidthi applies with opposite
            # sign to th_j, likewise dVjdthi; d2th = Hthithi (= Hthjthj,
            # with the cross term negated)
            H = np.zeros((nl, 4, 4))
            H[:, 0, 0] = d2vv[0]
            H[:, 1, 1] = d2vv[1]
            H[:, 0, 1] = H[:, 1, 0] = dVidVj
            H[:, 0, 2] = H[:, 2, 0] = dVidthi
            H[:, 0, 3] = H[:, 3, 0] = -dVidthi
            H[:, 1, 2] = H[:, 2, 1] = dVjdthi
            H[:, 1, 3] = H[:, 3, 1] = -dVjdthi
            H[:, 2, 2] = H[:, 3, 3] = d2th
            H[:, 2, 3] = H[:, 3, 2] = -d2th
            return H

        HPf = sym((2.0 * g / tau**2, np.zeros(nl)), -T1, Vj * T2, Vi * T2, VV * T1)
        HQf = sym((-2.0 * bsh / tau**2, np.zeros(nl)), -T2, -Vj * T1, -Vi * T1, VV * T2)
        HPt = sym((np.zeros(nl), 2.0 * g), -T3, Vj * T4, Vi * T4, VV * T3)
        HQt = sym((np.zeros(nl), -2.0 * bsh), T4, Vj * T3, Vi * T3, -VV * T4)
        return HPf, HQf, HPt, HQt

    # ------------------------------------------------------------------
    # equalities

    def _injections_t(self, x, t):
        """Net controllable active/reactive injection per bus at period t."""
        case = self.case
        L = self.layout
        pinj = -case.time_grid.load_p[:, t].copy()
        qinj = -case.time_grid.load_q[:, t].copy()
        np.add.at(pinj, self._gbus, x[L.pg_idx[:, t]])
        np.add.at(qinj, self._gbus, x[L.qg_idx[:, t]])
        np.add.at(pinj, self._rbus, x[L.prg_idx[:, t]])
        np.add.at(qinj, self._rbus, x[L.qrg_idx[:, t]])
        np.add.at(pinj, self._sbus, x[L.pdc_idx[:, t]] - x[L.pch_idx[:, t]])
        np.add.at(qinj, self._sbus, x[L.qe_idx[:, t]])
        np.add.at(qinj, self._vbus, x[L.qsvc_idx[:, t]])
        return pinj, qinj

    def eq_values(self, x: np.ndarray) -> np.ndarray:
        case = self.case
        L = self.layout
        nb, T = case.n_buses, case.n_periods
        ns = len(case.storages)
        out = np.zeros(self.n_eq)
        act = out[0:nb * T].reshape(nb, T)
        rea = out[nb * T:2 * nb * T].reshape(nb, T)
        gs, bs = self._bus_gs, self._bus_bs
        for t in range(T):
            fl = self._flows_t(x, t)
            V = x[L.v_idx[:, t]]
            pa = gs * V * V
            qa = -bs * V * V
            np.add.at(pa, self._fbus, fl["Pf"])
            np.add.at(pa, self._tbus, fl["Pt"])
            np.add.at(qa, self._fbus, fl["Qf"])
            np.add.at(qa, self._tbus, fl["Qt"])
            pinj, qinj = self._injections_t(x, t)
            act[:, t] = pa - pinj
            rea[:, t] = qa - qinj
        base = 2 * nb * T
        out[base:base + T] = x[L.th_idx[self._ref, :]]
        base += T
        for n, s in enumerate(case.storages):
            eT = (self._keep[n, -1] * s.soc_initial
                  + self._Mch[n, -1] @ x[L.pch_idx[n]]
                  + self._Mdc[n, -1] @ x[L.pdc_idx[n]])
            out[base + n] = eT - s.soc_initial
        base += ns
        k = 0
        for n in range(ns):
            for t in range(T):
                if self.modes[n, t] == Mode.CHARGE_ONLY:
                    out[base + k] = x[L.pdc_idx[n, t]]
                    k += 1
                elif self.modes[n, t] == Mode.DISCHARGE_ONLY:
                    out[base + k] = x[L.pch_idx[n, t]]
                    k += 1
        return out

    def eq_jacobian(self, x: np.ndarray) -> np.ndarray:
        case = self.case
        L = self.layout
        nb, T = case.n_buses, case.n_periods
        ns = len(case.storages)
        J = np.zeros((self.n_eq, self.n_vars))
        gs, bs = self._bus_gs, self._bus_bs

        def arow(j, t):
            return j * T + t

        def rrow(j, t):
            return nb * T + j * T + t

        for t in range(T):
            fl = self._flows_t(x, t)
            cols = fl["cols"]  # (4, nl)
            raf = self._fbus * T + t          # active row, from side
            rat = self._tbus * T + t
            rrf = nb * T + self._fbus * T + t  # reactive rows
            rrt = nb * T + self._tbus * T + t
            for a in range(4):
                np.add.at(J, (raf, cols[a]), fl["dPf"][a])
                np.add.at(J, (rat, cols[a]), fl["dPt"][a])
                np.add.at(J, (rrf, cols[a]), fl["dQf"][a])
                np.add.at(J, (rrt, cols[a]), fl["dQt"][a])
            V = x[L.v_idx[:, t]]
            for j in range(nb):
                J[arow(j, t), L.v_idx[j, t]] += 2.0 * gs[j] * V[j]
                J[rrow(j, t), L.v_idx[j, t]] += -2.0 * bs[j] * V[j]
            for k in range(L.ng):
                J[arow(self._gbus[k], t), L.pg_idx[k, t]] -= 1.0
                J[rrow(self._gbus[k], t), L.qg_idx[k, t]] -= 1.0
            for k in range(L.nr):
                J[arow(self._rbus[k], t), L.prg_idx[k, t]] -= 1.0
                J[rrow(self._rbus[k], t), L.qrg_idx[k, t]] -= 1.0
            for n in range(L.ns):
                J[arow(self._sbus[n], t), L.pdc_idx[n, t]] -= 1.0
                J[arow(self._sbus[n], t), L.pch_idx[n, t]] += 1.0
                J[rrow(self._sbus[n], t), L.qe_idx[n, t]] -= 1.0
            for k in range(L.nv):
                J[rrow(self._vbus[k], t), L.qsvc_idx[k, t]] -= 1.0
            # loads enter the residual as constants; no columns
        base = 2 * nb * T
        for t in range(T):
            J[base + t, L.th_idx[self._ref, t]] = 1.0
        base += T
        for n in range(ns):
            J[base + n, L.pch_idx[n]] = self._Mch[n, -1]
            J[base + n, L.pdc_idx[n]] = self._Mdc[n, -1]
        base += ns
        k = 0
        for n in range(ns):
            for t in range(T):
                if self.modes[n, t] == Mode.CHARGE_ONLY:
                    J[base + k, L.pdc_idx[n, t]] = 1.0
                    k += 1
                elif self.modes[n, t] == Mode.DISCHARGE_ONLY:
                    J[base + k, L.pch_idx[n, t]] = 1.0
                    k += 1
        return J

    # ------------------------------------------------------------------
    # inequalities

    def ineq_values(self, x: np.ndarray) -> np.ndarray:
        case = self.case
        L = self.layout
        T = case.n_periods
        dt = case.time_grid.interval_hours
        vals = np.empty(self.n_ineq)
        i = 0

        for j, bu in enumerate(case.buses):
            V = x[L.v_idx[j]]
            for t in range(T):
                vals[i] = bu.voltage_min - V[t]; i += 1
                vals[i] = V[t] - bu.voltage_max; i += 1
        flows = [self._flows_t(x, t) for t in range(T)]
        for e, br in enumerate(case.branches):
            for t in range(T):
                fl = flows[t]
                vals[i] = fl["Pf"][e]**2 + fl["Qf"][e]**2 - br.thermal_limit**2
                i += 1
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            for t in range(T):
                vals[i] = g.p_min - pg[t]; i += 1
                vals[i] = pg[t] - g.p_max; i += 1
        for k, g in enumerate(case.generators):
            qg = x[L.qg_idx[k]]
            for t in range(T):
                vals[i] = g.q_min - qg[t]; i += 1
                vals[i] = qg[t] - g.q_max; i += 1
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            for t in range(T):
                prev = g.initial_output if t == 0 else pg[t - 1]
                vals[i] = pg[t] - prev - g.ramp_up * dt; i += 1
                vals[i] = prev - pg[t] - g.ramp_down * dt; i += 1
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            ru = x[L.ru_idx[k]]
            for t in range(T):
                vals[i] = -ru[t]; i += 1
                vals[i] = ru[t] - g.ramp_up * dt; i += 1
                vals[i] = ru[t] + pg[t] - g.p_max; i += 1
        for k, g in enumerate(case.generators):
            pg = x[L.pg_idx[k]]
            rd = x[L.rd_idx[k]]
            for t in range(T):
                vals[i] = -rd[t]; i += 1
                vals[i] = rd[t] - g.ramp_down * dt; i += 1
                vals[i] = rd[t] - pg[t] + g.p_min; i += 1
        for t in range(T):
            ru_sum = float(np.sum(x[L.ru_idx[:, t]])) if L.ng else 0.0
            rd_sum = float(np.sum(x[L.rd_idx[:, t]])) if L.ng else 0.0
            vals[i] = case.time_grid.reserve_up[t] - ru_sum; i += 1
            vals[i] = case.time_grid.reserve_down[t] - rd_sum; i += 1
        for k, r in enumerate(case.renewables):
            prg = x[L.prg_idx[k]]
            for t in range(T):
                vals[i] = r.p_min[t] - prg[t]; i += 1
                vals[i] = prg[t] - r.forecast[t]; i += 1
        for k, r in enumerate(case.renewables):
            prg = x[L.prg_idx[k]]
            qrg = x[L.qrg_idx[k]]
            for t in range(T):
                vals[i] = prg[t]**2 + qrg[t]**2 - r.apparent_capacity**2; i += 1
        for k, v in enumerate(case.svcs):
            q = x[L.qsvc_idx[k]]
            for t in range(T):
                vals[i] = v.q_min - q[t]; i += 1
                vals[i] = q[t] - v.q_max; i += 1
        for n, s in enumerate(case.storages):
            pch = x[L.pch_idx[n]]
            for t in range(T):
                vals[i] = -pch[t] - self._ch_lo_wide[n, t]; i += 1
                vals[i] = pch[t] - s.p_ch_max; i += 1
        for n, s in enumerate(case.storages):
            pdc = x[L.pdc_idx[n]]
            for t in range(T):
                vals[i] = -pdc[t] - self._dc_lo_wide[n, t]; i += 1
                vals[i] = pdc[t] - s.p_dc_max; i += 1
        for n, s in enumerate(case.storages):
            pdc = x[L.pdc_idx[n]]
            qe = x[L.qe_idx[n]]
            for t in range(T):
                vals[i] = pdc[t]**2 + qe[t]**2 - s.apparent_capacity**2; i += 1
        for n, s in enumerate(case.storages):
            pch = x[L.pch_idx[n]]
            qe = x[L.qe_idx[n]]
            for t in range(T):
                vals[i] = pch[t]**2 + qe[t]**2 - s.apparent_capacity**2; i += 1
        for n, s in enumerate(case.storages):
            soc = (self._keep[n] * s.soc_initial
                   + self._Mch[n] @ x[L.pch_idx[n]] + self._Mdc[n] @ x[L.pdc_idx[n]])
            for t in range(T):
                vals[i] = s.soc_min - soc[t]; i += 1
                vals[i] = soc[t] - s.soc_max; i += 1
        for n, s in enumerate(case.storages):
            pch = x[L.pch_idx[n]]
            pdc = x[L.pdc_idx[n]]
            for t in range(T):
                vals[i] = (pch[t] / s.p_ch_max + pdc[t] / s.p_dc_max
                           - 1.0 - self._cut_wide[n, t]); i += 1
        assert i == self.n_ineq
        return vals

    def ineq_jacobian(self, x: np.ndarray) -> np.ndarray:
        case = self.case
        L = self.layout
        T = case.n_periods
        J = np.zeros((self.n_ineq, self.n_vars))
        i = 0

        for j in range(case.n_buses):
            for t in range(T):
                J[i, L.v_idx[j, t]] = -1.0; i += 1
                J[i, L.v_idx[j, t]] = 1.0; i += 1
        flows = [self._flows_t(x, t) for t in range(T)]
        for e in range(len(case.branches)):
            for t in range(T):
                fl = flows[t]
                for a in range(4):
                    J[i, fl["cols"][a, e]] += (2.0 * fl["Pf"][e] * fl["dPf"][a, e]
                                               + 2.0 * fl["Qf"][e] * fl["dQf"][a, e])
                i += 1
        for k in range(L.ng):
            for t in range(T):
                J[i, L.pg_idx[k, t]] = -1.0; i += 1
                J[i, L.pg_idx[k, t]] = 1.0; i += 1
        for k in range(L.ng):
            for t in range(T):
                J[i, L.qg_idx[k, t]] = -1.0; i += 1
                J[i, L.qg_idx[k, t]] = 1.0; i += 1
        for k in range(L.ng):
            for t in range(T):
                J[i, L.pg_idx[k, t]] = 1.0
                if t > 0:
                    J[i, L.pg_idx[k, t - 1]] = -1.0
                i += 1
                J[i, L.pg_idx[k, t]] = -1.0
                if t > 0:
                    J[i, L.pg_idx[k, t - 1]] = 1.0
                i += 1
        for k in range(L.ng):
            for t in range(T):
                J[i, L.ru_idx[k, t]] = -1.0; i += 1
                J[i, L.ru_idx[k, t]] = 1.0; i += 1
                J[i, L.ru_idx[k, t]] = 1.0
                J[i, L.pg_idx[k, t]] = 1.0
                i += 1
        for k in range(L.ng):
            for t in range(T):
                J[i, L.rd_idx[k, t]] = -1.0; i += 1
                J[i, L.rd_idx[k, t]] = 1.0; i += 1
                J[i, L.rd_idx[k, t]] = 1.0
                J[i, L.pg_idx[k, t]] = -1.0
                i += 1
        for t in range(T):
            J[i, L.ru_idx[:, t]] = -1.0; i += 1
            J[i, L.rd_idx[:, t]] = -1.0; i += 1
        for k in range(L.nr):
            for t in range(T):
                J[i, L.prg_idx[k, t]] = -1.0; i += 1
                J[i, L.prg_idx[k, t]] = 1.0; i += 1
        for k in range(L.nr):
            for t in range(T):
                J[i, L.prg_idx[k, t]] = 2.0 * x[L.prg_idx[k, t]]
                J[i, L.qrg_idx[k, t]] = 2.0 * x[L.qrg_idx[k, t]]
                i += 1
        for k in range(L.nv):
            for t in range(T):
                J[i, L.qsvc_idx[k, t]] = -1.0; i += 1
                J[i, L.qsvc_idx[k, t]] = 1.0; i += 1
        for n in range(L.ns):
            for t in range(T):
                J[i, L.pch_idx[n, t]] = -1.0; i += 1
                J[i, L.pch_idx[n, t]] = 1.0; i += 1
        for n in range(L.ns):
            for t in range(T):
                J[i, L.pdc_idx[n, t]] = -1.0; i += 1
                J[i, L.pdc_idx[n, t]] = 1.0; i += 1
        for n in range(L.ns):
            for t in range(T):
                J[i, L.pdc_idx[n, t]] = 2.0 * x[L.pdc_idx[n, t]]
                J[i, L.qe_idx[n, t]] = 2.0 * x[L.qe_idx[n, t]]
                i += 1
        for n in range(L.ns):
            for t in range(T):
                J[i, L.pch_idx[n, t]] = 2.0 * x[L.pch_idx[n, t]]
                J[i, L.qe_idx[n, t]] = 2.0 * x[L.qe_idx[n, t]]
                i += 1
        for n in range(L.ns):
            for t in range(T):
                J[i, L.pch_idx[n]] = -self._Mch[n, t]
                J[i, L.pdc_idx[n]] = -self._Mdc[n, t]
                i += 1
                J[i, L.pch_idx[n]] = self._Mch[n, t]
                J[i, L.pdc_idx[n]] = self._Mdc[n, t]
                i += 1
        for n, s in enumerate(case.storages):
            for t in range(T):
                J[i, L.pch_idx[n, t]] = 1.0 / s.p_ch_max
                J[i, L.pdc_idx[n, t]] = 1.0 / s.p_dc_max
                i += 1
        assert i == self.n_ineq
        return J

    # ------------------------------------------------------------------
    # Hessian of the Lagrangian

    def hessian(self, x: np.ndarray, nu: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """d2/dx2 of [objective + nu . c_E + lam . c_I] at x."""
        case = self.case
        L = self.layout
        nb, T = case.n_buses, case.n_periods
        H = np.zeros((self.n_vars, self.n_vars))

        for k, g in enumerate(case.generators):
            if g.cost_quadratic != 0.0:
                idx = L.pg_idx[k]
                H[idx, idx] += 2.0 * g.cost_quadratic
        for k, r in enumerate(case.renewables):
            if r.curtail_penalty != 0.0:
                for t in range(T):
                    if r.forecast[t] > 0:
                        c = L.prg_idx[k, t]
                        H[c, c] += 2.0 * r.curtail_penalty / r.forecast[t]

        gs, bs = self._bus_gs, self._bus_bs
        # thermal rows start right after the voltage-bound block
        th_off = 2 * nb * T
        nl = len(case.branches)
        for t in range(T):
            fl = self._flows_t(x, t)
            HPf, HQf, HPt, HQt = self._flow_hessians(fl)
            nu_af = nu[self._fbus * T + t]
            nu_at = nu[self._tbus * T + t]
            nu_rf = nu[nb * T + self._fbus * T + t]
            nu_rt = nu[nb * T + self._tbus * T + t]
            blk = (nu_af[:, None, None] * HPf + nu_at[:, None, None] * HPt
                   + nu_rf[:, None, None] * HQf + nu_rt[:, None, None] * HQt)
            lam_th = lam[th_off + np.arange(nl) * T + t]
            if np.any(lam_th != 0.0):
                blk += 2.0 * lam_th[:, None, None] * (
                    fl["dPf"].T[:, :, None] * fl["dPf"].T[:, None, :]
                    + fl["Pf"][:, None, None] * HPf
                    + fl["dQf"].T[:, :, None] * fl["dQf"].T[:, None, :]
                    + fl["Qf"][:, None, None] * HQf)
            cols = fl["cols"]
            for a in range(4):
                for b in range(4):
                    np.add.at(H, (cols[a], cols[b]), blk[:, a, b])
            for j in range(nb):
                c = L.v_idx[j, t]
                H[c, c] += 2.0 * gs[j] * nu[j * T + t]
                H[c, c] += -2.0 * bs[j] * nu[nb * T + j * T + t]

        # quadratic inequality rows: capability circles
        for k in range(L.nr):
            for t in range(T):
                h = ConstraintHandle(ConstraintKind.RG_CIRCLE, k, t)
                w = 2.0 * lam[self.ineq_pos[h]]
                if w != 0.0:
                    H[L.prg_idx[k, t], L.prg_idx[k, t]] += w
                    H[L.qrg_idx[k, t], L.qrg_idx[k, t]] += w
        for n in range(L.ns):
            for t in range(T):
                h = ConstraintHandle(ConstraintKind.CIRCLE_DC, n, t)
                w = 2.0 * lam[self.ineq_pos[h]]
                if w != 0.0:
                    H[L.pdc_idx[n, t], L.pdc_idx[n, t]] += w
                    H[L.qe_idx[n, t], L.qe_idx[n, t]] += w
                h = ConstraintHandle(ConstraintKind.CIRCLE_CH, n, t)
                w = 2.0 * lam[self.ineq_pos[h]]
                if w != 0.0:
                    H[L.pch_idx[n, t], L.pch_idx[n, t]] += w
                    H[L.qe_idx[n, t], L.qe_idx[n, t]] += w
        return H

    # ------------------------------------------------------------------

    def initial_point(self) -> np.ndarray:
        case = self.case
        L = self.layout
        x = np.zeros(self.n_vars)
        for j, bu in enumerate(case.buses):
            x[L.v_idx[j]] = min(max(1.0, bu.voltage_min), bu.voltage_max)
        for k, g in enumerate(case.generators):
            x[L.pg_idx[k]] = 0.5 * (g.p_min + g.p_max)
            x[L.qg_idx[k]] = 0.5 * (g.q_min + g.q_max)
        for k, r in enumerate(case.renewables):
            x[L.prg_idx[k]] = np.maximum(r.p_min, 0.9 * r.forecast)
        for k, v in enumerate(case.svcs):
            x[L.qsvc_idx[k]] = 0.5 * (v.q_min + v.q_max)
        # storage powers and reserves start at zero; slacks are set by the solver
        return x


def build_relaxed(case: NetworkCase) -> OpfProblem:
    """The smooth multi-period OPF with the complementarity dropped."""
    return OpfProblem(case, modes=None)


def build_exact(case: NetworkCase, modes: np.ndarray) -> OpfProblem:
    """The OPF with a fixed charge/discharge pattern (mode-pinning rows)."""
    return OpfProblem(case, modes=modes)
