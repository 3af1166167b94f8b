"""Primal-dual interior-point solver for smooth NLPs.

Solves   min f(x)   s.t.  c_E(x) = 0,   c_I(x) <= 0

by introducing slacks (c_I + s = 0, s > 0), following a monotone barrier
schedule, and taking Newton steps on the perturbed KKT system. The slack and
inequality-multiplier blocks are eliminated analytically so each iteration
factors only the reduced symmetric system in (dx, dnu); an LDL^T
factorization supplies the inertia used to pick the Hessian regularization.
A feasibility-restoration phase (Gauss-Newton on the constraint residual)
backs the method up when the line search wedges, and doubles as the
infeasibility detector.

Every multiplier is exposed on the result: equality duals carry signs as
given by the Lagrangian L = f + nu.c_E + lam.c_I, inequality duals are
nonnegative.

The problem object must provide: n_vars, n_eq, n_ineq, objective(x),
gradient(x), eq_values(x), eq_jacobian(x), ineq_values(x), ineq_jacobian(x),
hessian(x, nu, lam) (the Lagrangian Hessian), and initial_point().
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg

from .formulation import ConstraintKind, OpfProblem, soc_trajectory

__all__ = [
    "SolverOptions",
    "SolveStatus",
    "SolutionPoint",
    "DualRecord",
    "KktResiduals",
    "SolveResult",
    "solve",
    "kkt_residuals",
]

LOG_ENV_VAR = "STORAGE_OPF_LOG"


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE_DETECTED = "infeasible_detected"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SolverOptions:
    kkt_tolerance: float = 1e-8
    barrier_initial: float = 0.1
    barrier_shrink: float = 0.2          # barrier reduction factor
    fraction_to_boundary: float = 0.995  # step-length floor keeping s, lam > 0
    max_iterations: int = 300
    regularization_min: float = 1e-10    # first Hessian shift tried
    regularization_max: float = 1e4      # give up beyond this shift
    log_path: str | None = None          # overrides the STORAGE_OPF_LOG env var

    def __post_init__(self):
        if not (0.0 < self.barrier_shrink < 1.0):
            raise ValueError("barrier_shrink must lie in (0, 1)")
        if not (0.0 < self.fraction_to_boundary < 1.0):
            raise ValueError("fraction_to_boundary must lie in (0, 1)")
        if self.kkt_tolerance <= 0.0 or self.barrier_initial <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class KktResiduals:
    """Unscaled residuals of the first-order conditions at the returned point."""
    stationarity: float
    eq_violation: float
    ineq_violation: float
    complementarity: float

    def max_residual(self) -> float:
        return max(self.stationarity, self.eq_violation,
                   self.ineq_violation, self.complementarity)


def _primal_infeasibility(problem, x: np.ndarray) -> float:
    """Max-norm of equality residuals and inequality violations at x."""
    cE = problem.eq_values(x)
    cI = problem.ineq_values(x)
    out = float(np.max(np.abs(cE))) if cE.size else 0.0
    if cI.size:
        out = max(out, float(np.max(np.maximum(cI, 0.0))))
    return out


@dataclass
class SolutionPoint:
    """Primal solution unpacked onto the grid quantities."""
    x: np.ndarray
    objective: float
    primal_infeasibility: float
    v: np.ndarray        # (nb, T) voltage magnitudes
    theta: np.ndarray    # (nb, T) angles
    gen_p: np.ndarray    # (ng, T)
    gen_q: np.ndarray
    reserve_up: np.ndarray
    reserve_down: np.ndarray
    rg_p: np.ndarray     # (nr, T)
    rg_q: np.ndarray
    p_ch: np.ndarray     # (ns, T)
    p_dc: np.ndarray
    q_e: np.ndarray
    q_svc: np.ndarray    # (nv, T)
    soc: np.ndarray      # (ns, T)

    @classmethod
    def from_vector(cls, problem: OpfProblem, x: np.ndarray) -> "SolutionPoint":
        L = problem.layout
        p_ch = x[L.pch_idx]
        p_dc = x[L.pdc_idx]
        return cls(
            x=x.copy(), objective=problem.objective(x),
            primal_infeasibility=_primal_infeasibility(problem, x),
            v=x[L.v_idx], theta=x[L.th_idx],
            gen_p=x[L.pg_idx], gen_q=x[L.qg_idx],
            reserve_up=x[L.ru_idx], reserve_down=x[L.rd_idx],
            rg_p=x[L.prg_idx], rg_q=x[L.qrg_idx],
            p_ch=p_ch, p_dc=p_dc, q_e=x[L.qe_idx], q_svc=x[L.qsvc_idx],
            soc=soc_trajectory(problem.case, p_ch, p_dc),
        )

    def scd(self) -> np.ndarray:
        """Simultaneous charge-discharge products, (ns, T)."""
        return self.p_ch * self.p_dc


class DualRecord:
    """All constraint multipliers of a solve, addressable by handle or block."""

    def __init__(self, problem: OpfProblem, nu: np.ndarray, lam: np.ndarray):
        self.problem = problem
        self.nu = nu
        self.lam = lam
        self._eq_pos = problem.eq_pos
        self._ineq_pos = problem.ineq_pos
        groups: dict[tuple, list[int]] = {}
        for i, h in enumerate(problem.ineq_handles):
            groups.setdefault((h.kind, h.side), []).append(i)
        self._ineq_groups = {k: np.array(v, dtype=int) for k, v in groups.items()}

    def eq(self, handle) -> float:
        return float(self.nu[self._eq_pos[handle]])

    def ineq(self, handle) -> float:
        return float(self.lam[self._ineq_pos[handle]])

    def lmp(self) -> np.ndarray:
        """Active power balance duals, (nb, T), $ per p.u. per interval."""
        nb = self.problem.case.n_buses
        T = self.problem.case.n_periods
        return self.nu[0:nb * T].reshape(nb, T).copy()

    def reactive_price(self) -> np.ndarray:
        nb = self.problem.case.n_buses
        T = self.problem.case.n_periods
        return self.nu[nb * T:2 * nb * T].reshape(nb, T).copy()

    def soc_terminal(self) -> np.ndarray:
        """Terminal stored-energy equality duals, one per storage."""
        case = self.problem.case
        out = np.zeros(len(case.storages))
        for n in range(len(case.storages)):
            h = next(h for h in self.problem.eq_handles
                     if h.kind == ConstraintKind.SOC_TERMINAL and h.entity == n)
            out[n] = self.nu[self._eq_pos[h]]
        return out

    def ineq_matrix(self, kind: ConstraintKind, side: str | None = None) -> np.ndarray:
        """Multipliers of one row family as an (entities, T) matrix."""
        T = self.problem.case.n_periods
        idx = self._ineq_groups.get((kind, side))
        if idx is None:
            return np.zeros((0, T))
        return self.lam[idx].reshape(-1, T)


@dataclass
class SolveResult:
    status: SolveStatus
    solution: SolutionPoint | None
    duals: DualRecord | None
    iterations: int
    residuals: KktResiduals | None
    mu_final: float
    nu: np.ndarray = None    # raw equality multipliers
    lam: np.ndarray = None   # raw inequality multipliers
    message: str = ""
    problem: OpfProblem | None = None

    @property
    def objective(self) -> float:
        return self.solution.objective if self.solution is not None else float("nan")

    def kkt_residuals(self) -> KktResiduals:
        return self.residuals


def kkt_residuals(problem, x: np.ndarray, nu: np.ndarray,
                  lam: np.ndarray) -> KktResiduals:
    """First-order residuals at a primal-dual point, as max-norms.

    Stationarity is grad f + J_E^T nu + J_I^T lam evaluated exactly;
    complementarity is the worst |lam_i * c_I_i(x)| row.
    """
    r_d = problem.gradient(x)
    cE = problem.eq_values(x)
    cI = problem.ineq_values(x)
    if cE.size:
        r_d = r_d + problem.eq_jacobian(x).T @ nu
    if cI.size:
        r_d = r_d + problem.ineq_jacobian(x).T @ lam
    return KktResiduals(
        stationarity=float(np.max(np.abs(r_d))) if r_d.size else 0.0,
        eq_violation=float(np.max(np.abs(cE))) if cE.size else 0.0,
        ineq_violation=float(np.max(np.maximum(cI, 0.0))) if cI.size else 0.0,
        complementarity=float(np.max(np.abs(lam * cI))) if cI.size else 0.0,
    )


# ---------------------------------------------------------------------------
# linear algebra helpers

def _inertia(K: np.ndarray) -> tuple[int, int, int]:
    """(positive, negative, zero) eigenvalue counts via a symmetric LDL^T."""
    n = K.shape[0]
    if n == 0:
        return 0, 0, 0
    _, D, _ = scipy.linalg.ldl(K, lower=True)
    tol = np.finfo(float).eps * max(1.0, float(np.max(np.abs(K))))
    pos = neg = zero = 0
    i = 0
    while i < n:
        if i + 1 < n and D[i + 1, i] != 0.0:
            a, bb, c = D[i, i], D[i + 1, i], D[i + 1, i + 1]
            tr, det = a + c, a * c - bb * bb
            disc = max(tr * tr - 4.0 * det, 0.0)
            root = np.sqrt(disc)
            for ev in ((tr + root) / 2.0, (tr - root) / 2.0):
                if ev > tol:
                    pos += 1
                elif ev < -tol:
                    neg += 1
                else:
                    zero += 1
            i += 2
        else:
            d = D[i, i]
            if d > tol:
                pos += 1
            elif d < -tol:
                neg += 1
            else:
                zero += 1
            i += 1
    return pos, neg, zero


def _ftb_alpha(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    """Largest alpha <= 1 keeping v + alpha*dv >= (1 - tau) * v."""
    if v.size == 0:
        return 1.0
    mask = dv < 0
    if not np.any(mask):
        return 1.0
    return float(min(1.0, np.min(-tau * v[mask] / dv[mask])))


# ---------------------------------------------------------------------------
# restoration phase

def _restore(problem, x, s, feas_target):
    """Gauss-Newton descent on the squared constraint residual.

    Returns (x, s, reached_target, residual_inf). Stalling at a significant
    residual is the infeasibility certificate.
    """
    n = problem.n_vars
    x = x.copy()
    s = np.maximum(s.copy(), 1e-10)
    no_progress = 0
    r_inf_prev = np.inf
    for _ in range(100):
        cE = problem.eq_values(x)
        cI = problem.ineq_values(x)
        r = np.concatenate([cE, cI + s])
        r_inf = float(np.max(np.abs(r))) if r.size else 0.0
        if r_inf <= feas_target:
            return x, s, True, r_inf
        JE = problem.eq_jacobian(x)
        JI = problem.ineq_jacobian(x)
        m_e, m_i = JE.shape[0], JI.shape[0]
        J = np.zeros((m_e + m_i, n + m_i))
        J[:m_e, :n] = JE
        J[m_e:, :n] = JI
        J[m_e:, n:] = np.eye(m_i)
        g = J.T @ r
        if np.max(np.abs(g)) <= 1e-8 * max(1.0, r_inf):
            return x, s, False, r_inf     # first-order stationary, still infeasible
        A = J.T @ J
        A[np.diag_indices_from(A)] += 1e-10
        d = np.linalg.solve(A, -g)
        dx, ds = d[:n], d[n:]
        alpha = _ftb_alpha(s, ds, 0.995)
        m0 = 0.5 * float(r @ r)
        slope = float(g @ d)
        accepted = False
        for _ in range(40):
            xt = x + alpha * dx
            st = s + alpha * ds
            rt = np.concatenate([problem.eq_values(xt), problem.ineq_values(xt) + st])
            if 0.5 * float(rt @ rt) <= m0 + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, s, False, r_inf
        x, s = x + alpha * dx, s + alpha * ds
        if r_inf_prev - r_inf < 1e-14 * max(1.0, r_inf):
            no_progress += 1
            if no_progress >= 5:
                return x, s, False, r_inf
        else:
            no_progress = 0
        r_inf_prev = r_inf
    cE = problem.eq_values(x)
    cI = problem.ineq_values(x)
    r_inf = float(np.max(np.abs(np.concatenate([cE, cI + s]))))
    return x, s, r_inf <= feas_target, r_inf


def _reinit_duals(problem, grad_s, x, s, m_e: int, m_i: int, mu: float):
    """Fresh multipliers: nu and near-active lam by least squares on the
    stationarity condition, the remaining lam from the barrier identity.

    Setting lam = mu/s on a row whose slack has already collapsed would
    manufacture an enormous multiplier, so rows with tiny slack join the
    least-squares fit instead.
    """
    lam = np.full(m_i, mu) / s if m_i else np.zeros(0)
    act = s <= 1e-5 if m_i else np.zeros(0, dtype=bool)
    JI = problem.ineq_jacobian(x) if m_i else None
    n_act = int(np.sum(act))
    if m_e or n_act:
        rhs = -grad_s(x)
        if m_i and np.any(~act):
            rhs = rhs - JI[~act].T @ lam[~act]
        cols = []
        if m_e:
            cols.append(problem.eq_jacobian(x).T)
        if n_act:
            cols.append(JI[act].T)
        A = np.hstack(cols)
        fit, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        top = np.max(np.abs(fit)) if fit.size else 0.0
        if top > 1e3:
            fit *= 1e3 / top
        nu = fit[:m_e]
        if n_act:
            lam[act] = np.clip(fit[m_e:], 1e-8, None)
    else:
        nu = np.zeros(0)
    return nu, lam


# ---------------------------------------------------------------------------
# main solver

def solve(problem, options: SolverOptions | None = None,
          x0: np.ndarray | None = None) -> SolveResult:
    """Run the interior-point method on a problem object."""
    opt = options or SolverOptions()
    n = problem.n_vars
    m_e = problem.n_eq
    m_i = problem.n_ineq

    x = np.array(problem.initial_point() if x0 is None else x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")

    # objective scaling keeps the dual magnitudes near unity internally;
    # multipliers are scaled back on exit
    g0 = problem.gradient(x)
    sigma = float(np.clip(np.max(np.abs(g0)) / 100.0, 1.0, 1e6)) if g0.size else 1.0

    def f_s(xx):
        return problem.objective(xx) / sigma

    def grad_s(xx):
        return problem.gradient(xx) / sigma

    def hess_s(xx, nu_s, lam_s):
        return problem.hessian(xx, nu_s * sigma, lam_s * sigma) / sigma

    mu = opt.barrier_initial
    cI = problem.ineq_values(x)
    s = np.maximum(-cI, 1e-2)
    nu, lam = _reinit_duals(problem, grad_s, x, s, m_e, m_i, mu)

    rho = 1.0
    delta_last = 0.0
    restorations = 0
    dual_resets = 0
    alpha = 0.0
    status = SolveStatus.MAX_ITERATIONS
    message = ""
    log_rows: list[str] = []
    it = 0

    def error(mu_val, grad, cE_, cI_, s_, nu_, lam_):
        r_d = grad + (JE.T @ nu_ if m_e else 0.0) + (JI.T @ lam_ if m_i else 0.0)
        denom = max(1, m_e + m_i)
        s_d = max(100.0, (np.sum(np.abs(lam_)) + np.sum(np.abs(nu_))) / denom) / 100.0
        s_c = max(100.0, np.sum(np.abs(lam_)) / max(1, m_i)) / 100.0
        e_stat = float(np.max(np.abs(r_d))) / s_d if r_d.size else 0.0
        e_eq = float(np.max(np.abs(cE_))) if m_e else 0.0
        e_slack = float(np.max(np.abs(cI_ + s_))) if m_i else 0.0
        e_comp = float(np.max(np.abs(s_ * lam_ - mu_val))) / s_c if m_i else 0.0
        return max(e_stat, e_eq, e_slack, e_comp)

    for it in range(1, opt.max_iterations + 1):
        fx = f_s(x)
        grad = grad_s(x)
        cE = problem.eq_values(x)
        cI = problem.ineq_values(x)
        JE = problem.eq_jacobian(x)
        JI = problem.ineq_jacobian(x)

        e0 = error(0.0, grad, cE, cI, s, nu, lam)
        if e0 <= opt.kkt_tolerance:
            status = SolveStatus.OPTIMAL
            break
        while mu > opt.kkt_tolerance / 100.0 and \
                error(mu, grad, cE, cI, s, nu, lam) <= 10.0 * mu:
            mu = max(opt.kkt_tolerance / 100.0,
                     min(opt.barrier_shrink * mu, mu ** 1.5))

        Sig = lam / s if m_i else np.zeros(0)
        W = hess_s(x, nu, lam)
        if m_i:
            W = W + (JI.T * Sig) @ JI

        # assemble and inertia-correct the reduced system
        dim = n + m_e
        delta_x = 0.0
        delta_c = 0.0
        dxn = None
        for attempt in range(40):
            K = np.zeros((dim, dim))
            K[:n, :n] = W
            if delta_x:
                K[np.diag_indices(n)] += delta_x
            if m_e:
                K[:n, n:] = JE.T
                K[n:, :n] = JE
                if delta_c:
                    K[n + np.arange(m_e), n + np.arange(m_e)] = -delta_c
            # symmetric equilibration: congruence keeps the inertia, and a
            # unit matrix scale stops huge barrier rows from drowning the
            # tiny-but-genuine curvature of nearly free variables
            d = 1.0 / np.sqrt(np.maximum(np.max(np.abs(K), axis=0), 1e-8))
            Ks = K * d[:, None] * d[None, :]
            p_cnt, n_cnt, z_cnt = _inertia(Ks)
            acceptable = p_cnt == n and n_cnt == m_e and z_cnt == 0
            if not acceptable and delta_c > 0.0 and p_cnt == n and \
                    n_cnt + z_cnt == m_e:
                # the shifted constraint pivots can fall below the LDL zero
                # threshold when the barrier terms dominate the matrix scale,
                # so trust the shift instead of the eigenvalue count
                acceptable = True
            if acceptable:
                rhs = np.zeros(dim)
                rhs[:n] = -(grad + (JE.T @ nu if m_e else 0.0))
                if m_i:
                    rhs[:n] -= JI.T @ (mu / s) + JI.T @ (Sig * (cI + s))
                rhs[n:] = -cE
                try:
                    fac = scipy.linalg.lu_factor(Ks)
                    sol = scipy.linalg.lu_solve(fac, rhs * d)
                    sol = sol * d
                except (scipy.linalg.LinAlgError, ValueError):
                    sol = None
                if sol is not None and np.all(np.isfinite(sol)):
                    dxn = sol
                    kkt_lu, kkt_d = fac, d
                    break
            if p_cnt == n and n_cnt + z_cnt == m_e and delta_c == 0.0:
                # curvature is fine, only the constraint block is singular;
                # dependent active rows need a dual shift, not a primal one
                delta_c = 1e-8
                continue
            if delta_x == 0.0:
                delta_x = opt.regularization_min if delta_last == 0.0 else max(
                    opt.regularization_min, delta_last / 3.0)
            else:
                # climb fast when no previous shift is known to be nearby
                delta_x *= 100.0 if delta_last == 0.0 else 10.0
            if delta_x > opt.regularization_max:
                if delta_c == 0.0:
                    delta_c = 1e-8
                    delta_x = 0.0
                else:
                    break
        if dxn is None:
            # a hopeless KKT system far from feasibility usually means the
            # duals are diverging on an incompatible constraint set; let the
            # restoration phase arbitrate before giving up
            r_I0 = cI + s if m_i else np.zeros(0)
            infeas_inf = max(float(np.max(np.abs(cE))) if m_e else 0.0,
                             float(np.max(np.abs(r_I0))) if m_i else 0.0)
            if restorations >= 3 or infeas_inf <= 100.0 * opt.kkt_tolerance:
                status = SolveStatus.NUMERICAL_FAILURE
                message = "could not obtain a descent direction"
                break
            restorations += 1
            target = max(10.0 * opt.kkt_tolerance, 1e-4 * infeas_inf)
            x, s, ok, r_inf = _restore(problem, x, s, target)
            if not ok:
                if r_inf > 100.0 * opt.kkt_tolerance:
                    status = SolveStatus.INFEASIBLE_DETECTED
                    message = (f"restoration stalled at constraint violation "
                               f"{r_inf:.3e}")
                else:
                    status = SolveStatus.NUMERICAL_FAILURE
                    message = "restoration made no progress"
                break
            s = np.maximum(s, 1e-8)
            mu = max(mu, 1e-6)
            nu, lam = _reinit_duals(problem, grad_s, x, s, m_e, m_i, mu)
            rho = 1.0
            delta_last = 0.0
            continue
        delta_last = delta_x

        dx = dxn[:n]
        dnu = dxn[n:] if m_e else np.zeros(0)
        r_I = cI + s if m_i else np.zeros(0)
        ds = -r_I - (JI @ dx if m_i else 0.0)
        dlam = (-lam + mu / s + Sig * (r_I + JI @ dx)) if m_i else np.zeros(0)

        tau = max(opt.fraction_to_boundary, 1.0 - mu)
        a_s = _ftb_alpha(s, ds, tau)
        a_lam = _ftb_alpha(lam, dlam, tau)

        # the exact-penalty weight must dominate the candidate multipliers;
        # it must also forget stale spikes, or one chaotic early iteration
        # would strangle every later step through the penalty term
        cand = 1.0
        if m_e:
            cand = max(cand, float(np.max(np.abs(nu + dnu))))
        if m_i:
            cand = max(cand, float(np.max(np.abs(lam + dlam))))
        need = 1.1 * cand + 1.0
        if need > rho:
            rho = need
        elif 4.0 * need < rho:
            rho = 4.0 * need

        infeas = (np.sum(np.abs(cE)) if m_e else 0.0) + \
                 (np.sum(np.abs(r_I)) if m_i else 0.0)

        def merit(xx, ss):
            val = f_s(xx)
            if m_i:
                val -= mu * float(np.sum(np.log(ss)))
                val += rho * float(np.sum(np.abs(problem.ineq_values(xx) + ss)))
            if m_e:
                val += rho * float(np.sum(np.abs(problem.eq_values(xx))))
            return val

        phi0 = fx
        if m_i:
            phi0 += -mu * float(np.sum(np.log(s))) + rho * float(np.sum(np.abs(r_I)))
        if m_e:
            phi0 += rho * float(np.sum(np.abs(cE)))
        D = float(grad @ dx)
        if m_i:
            D -= mu * float(np.sum(ds / s))
        D -= rho * infeas
        if D > 0.0 and infeas > 1e-14:
            rho += (D + 1.0) / infeas
            D = float(grad @ dx) - (mu * float(np.sum(ds / s)) if m_i else 0.0) \
                - rho * infeas
            phi0 = fx
            if m_i:
                phi0 += -mu * float(np.sum(np.log(s))) + rho * float(np.sum(np.abs(r_I)))
            if m_e:
                phi0 += rho * float(np.sum(np.abs(cE)))

        # the sufficient-decrease test needs a machine-noise allowance: near
        # a solution the merit function is flat along the step to roundoff,
        # and without the allowance the dual components can never move
        noise = 10.0 * np.finfo(float).eps * max(1.0, abs(phi0))
        alpha = a_s
        accepted = False
        soc_point = None
        first_trial = True
        while alpha >= 1e-12:
            if merit(x + alpha * dx, s + alpha * ds) <= \
                    phi0 + 1e-4 * alpha * D + noise:
                accepted = True
                break
            if first_trial and (m_e or m_i):
                # a full step rejected only because the constraints curve
                # away from their linearization would force the line search
                # into a crawl whenever the penalty weight is large; correct
                # the step with the violation measured at the trial point
                # before giving up on the full step
                xt = x + a_s * dx
                st = s + a_s * ds
                viol_prev = None
                for _ in range(3):
                    cE_t = problem.eq_values(xt) if m_e else np.zeros(0)
                    rI_t = (problem.ineq_values(xt) + st) if m_i \
                        else np.zeros(0)
                    viol = float(np.sum(np.abs(cE_t)) + np.sum(np.abs(rI_t)))
                    if viol_prev is None:
                        if viol <= infeas:
                            break  # feasibility did not degrade; not curvature
                    elif viol > 0.5 * viol_prev:
                        break
                    viol_prev = viol
                    rhs_c = np.zeros(dim)
                    if m_i:
                        rhs_c[:n] = -(JI.T @ (Sig * rI_t))
                    if m_e:
                        rhs_c[n:] = -cE_t
                    try:
                        solc = scipy.linalg.lu_solve(kkt_lu, rhs_c * kkt_d)
                        solc = solc * kkt_d
                    except (scipy.linalg.LinAlgError, ValueError):
                        break
                    if not np.all(np.isfinite(solc)):
                        break
                    dxc = solc[:n]
                    dsc = (-rI_t - JI @ dxc) if m_i else np.zeros(0)
                    ac = _ftb_alpha(st, dsc, tau) if m_i else 1.0
                    xt = xt + ac * dxc
                    st = st + ac * dsc
                    if merit(xt, st) <= phi0 + 1e-4 * a_s * D + noise:
                        accepted = True
                        soc_point = (xt, st)
                        alpha = a_s
                        break
                if accepted:
                    break
            first_trial = False
            alpha *= 0.5

        if not accepted:
            infeas_inf = max(float(np.max(np.abs(cE))) if m_e else 0.0,
                             float(np.max(np.abs(r_I))) if m_i else 0.0)
            if infeas_inf <= 10.0 * opt.kkt_tolerance and dual_resets < 2:
                # the iterate is primal-converged and the merit function is
                # blind to the remaining dual error; rebuild the multipliers
                # at the current point and keep iterating
                dual_resets += 1
                nu, lam = _reinit_duals(problem, grad_s, x, s, m_e, m_i, mu)
                rho = 1.0
                delta_last = 0.0
                continue
            if restorations >= 3 or infeas_inf <= 10.0 * opt.kkt_tolerance:
                status = SolveStatus.NUMERICAL_FAILURE
                message = "line search failed near a feasible point"
                break
            restorations += 1
            target = max(10.0 * opt.kkt_tolerance, 1e-4 * infeas_inf)
            x, s, ok, r_inf = _restore(problem, x, s, target)
            if not ok:
                if r_inf > 100.0 * opt.kkt_tolerance:
                    status = SolveStatus.INFEASIBLE_DETECTED
                    message = (f"restoration stalled at constraint violation "
                               f"{r_inf:.3e}")
                else:
                    status = SolveStatus.NUMERICAL_FAILURE
                    message = "restoration made no progress"
                break
            s = np.maximum(s, 1e-8)
            mu = max(mu, 1e-6)
            nu, lam = _reinit_duals(problem, grad_s, x, s, m_e, m_i, mu)
            rho = 1.0
            delta_last = 0.0
            continue

        if soc_point is not None:
            x, s = soc_point
        else:
            x = x + alpha * dx
            s = s + alpha * ds
        if m_e:
            nu = nu + alpha * dnu
        if m_i:
            lam = lam + a_lam * dlam
            # keep each multiplier within a wide band of mu/s so a dual
            # blow-up on a degenerate row cannot wreck the next KKT matrix
            lam = np.clip(lam, mu / (1e10 * s), 1e10 * mu / s)

        prim_inf = max(float(np.max(np.abs(cE))) if m_e else 0.0,
                       float(np.max(np.abs(r_I))) if m_i else 0.0)
        r_d = grad + (JE.T @ nu if m_e else 0.0) + (JI.T @ lam if m_i else 0.0)
        dual_inf = float(np.max(np.abs(r_d))) if r_d.size else 0.0
        log_rows.append(f"{it}\t{mu:.6e}\t{problem.objective(x):.10e}"
                        f"\t{prim_inf:.6e}\t{dual_inf:.6e}\t{alpha:.3e}")

    else:
        it = opt.max_iterations

    # scale multipliers back to the original objective
    nu_out = nu * sigma
    lam_out = lam * sigma

    log_path = opt.log_path or os.environ.get(LOG_ENV_VAR)
    if log_path:
        with open(log_path, "a") as fh:
            fh.write("iteration\tmu\tobjective\tprimal_inf\tdual_inf\tstep\n")
            fh.write("\n".join(log_rows))
            fh.write("\n")

    if status == SolveStatus.INFEASIBLE_DETECTED:
        return SolveResult(status=status, solution=None, duals=None,
                           iterations=it, residuals=None, mu_final=mu,
                           nu=nu_out, lam=lam_out, message=message,
                           problem=problem)

    residuals = kkt_residuals(problem, x, nu_out, lam_out)
    if isinstance(problem, OpfProblem):
        solution = SolutionPoint.from_vector(problem, x)
        duals = DualRecord(problem, nu_out, lam_out)
    else:
        empty = np.zeros((0, 0))
        solution = SolutionPoint(x=x.copy(), objective=problem.objective(x),
                                 primal_infeasibility=_primal_infeasibility(problem, x),
                                 v=empty, theta=empty, gen_p=empty, gen_q=empty,
                                 reserve_up=empty, reserve_down=empty,
                                 rg_p=empty, rg_q=empty, p_ch=empty, p_dc=empty,
                                 q_e=empty, q_svc=empty, soc=empty)
        duals = None
    if status == SolveStatus.MAX_ITERATIONS and not message:
        message = f"stopped after {opt.max_iterations} iterations"
    return SolveResult(status=status, solution=solution, duals=duals,
                       iterations=it, residuals=residuals, mu_final=mu,
                       nu=nu_out, lam=lam_out, message=message, problem=problem)
