"""Branch-and-bound over storage charge/discharge modes.

The exact model adds, per storage and period, the complementarity
requirement p_ch * p_dc = 0. This module enforces it combinatorially: each
tree node is the relaxed problem plus pinning equalities for the modes fixed
so far, nodes are solved eagerly as they are created, and the search pops
the open node with the smallest objective (ties broken deeper-first, then
insertion order, so runs are deterministic). A node whose solution has no
simultaneous charge-discharge above tolerance is feasible for the exact
model and becomes the incumbent; otherwise the slot with the largest
product is branched into a charge-only and a discharge-only child, each
warm-started from the parent point with the pinned variable zeroed.

Nodes are NLPs, so child objectives can dip below the parent's by solver
noise; a child that undercuts its parent beyond a small slack is counted
and kept open rather than trusted or pruned. Nodes whose solve fails are
pruned with a warning counter. Infeasible nodes (a mode pattern the storage
dynamics cannot satisfy) are pruned silently; that is the search working as
intended.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappush, heappop

import numpy as np

from .formulation import Mode, build_exact
from .network import NetworkCase
from .ipm import (DualRecord, SolutionPoint, SolveStatus, SolverOptions,
                  solve as nlp_solve)

__all__ = [
    "BnbOptions",
    "BnbStatus",
    "BnbNode",
    "BnbResult",
    "solve_mip",
    "scd_residual",
]


def scd_residual(solution: SolutionPoint, case: NetworkCase):
    """Per-(storage, period) charge*discharge products and their maximum.

    Products are exact, in per-unit squared.
    """
    ns = len(case.storages)
    T = case.n_periods
    if solution.p_ch.shape != (ns, T):
        raise ValueError("solution storage dimensions do not match the case")
    per_slot = solution.p_ch * solution.p_dc
    maximum = float(np.max(per_slot)) if per_slot.size else 0.0
    return per_slot, maximum


class BnbStatus(Enum):
    OPTIMAL = "optimal"
    NODE_LIMIT = "node_limit"
    NO_SOLUTION = "no_solution"


@dataclass
class BnbOptions:
    scd_tolerance: float = 1e-8    # p.u.^2; below this a node is mode-feasible
    gap_tolerance: float = 1e-6    # relative; stop when no open node can beat it
    max_nodes: int = 500
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class BnbNode:
    modes: np.ndarray      # (ns, T) Mode values fixed so far
    bound: float           # this node's own objective (eager solves)
    depth: int


@dataclass
class BnbResult:
    status: BnbStatus
    solution: SolutionPoint | None
    duals: DualRecord | None
    objective: float
    nodes_explored: int
    gap: float
    failed_nodes: int        # solver breakdowns, pruned with a warning
    infeasible_nodes: int    # mode patterns the dynamics cannot satisfy
    bound_violations: int    # children that undercut their parent beyond slack
    message: str = ""


def _bound_slack(parent_bound: float) -> float:
    return 1e-6 * max(1.0, abs(parent_bound))


def solve_mip(case: NetworkCase, options: BnbOptions | None = None) -> BnbResult:
    """Solve the exact model by mode branch-and-bound.

    Returns the best mode-feasible KKT point found. The search is serial and
    deterministic: identical inputs explore identical trees.
    """
    opt = options or BnbOptions()
    ns = len(case.storages)
    T = case.n_periods

    heap: list = []
    seq = itertools.count()
    explored = 0
    failed = 0
    infeasible = 0
    bound_violations = 0
    incumbent = None          # (objective, solution, duals)
    messages: list = []

    def inc_obj():
        return incumbent[0] if incumbent is not None else np.inf

    def cutoff():
        if incumbent is None:
            return np.inf
        return inc_obj() - opt.gap_tolerance * max(1.0, abs(inc_obj()))

    def solve_node(modes, x0, parent_bound, depth):
        """Solve one node; file it as incumbent, open node, or pruned."""
        nonlocal explored, failed, infeasible, bound_violations, incumbent
        problem = build_exact(case, modes)
        res = nlp_solve(problem, opt.solver, x0=x0)
        if res.status != SolveStatus.OPTIMAL and x0 is not None:
            # a warm start from the parent can poison the barrier schedule;
            # give the node one cold attempt before writing it off
            res = nlp_solve(problem, opt.solver)
        explored += 1
        if res.status == SolveStatus.INFEASIBLE_DETECTED:
            infeasible += 1
            return
        if res.status != SolveStatus.OPTIMAL:
            failed += 1
            messages.append(
                f"node at depth {depth} pruned: {res.status.value}")
            return
        obj = res.objective
        if np.isfinite(parent_bound) and obj < parent_bound - _bound_slack(parent_bound):
            bound_violations += 1
            messages.append(
                f"node at depth {depth} undercuts its parent: "
                f"{obj:.6e} < {parent_bound:.6e}")
        per_slot, mx = scd_residual(res.solution, case)
        if mx <= opt.scd_tolerance:
            if obj < inc_obj():
                incumbent = (obj, res.solution, res.duals)
            return
        if obj >= cutoff():
            return
        heappush(heap, (obj, -depth, next(seq), modes, res, per_slot))

    root_modes = np.zeros((ns, T), dtype=np.int8)
    solve_node(root_modes, None, np.inf, 0)
    if explored == 1 and incumbent is None and not heap:
        why = ("relaxed problem infeasible" if infeasible else
               "root relaxation failed")
        return BnbResult(status=BnbStatus.NO_SOLUTION, solution=None,
                         duals=None, objective=float("nan"), nodes_explored=1,
                         gap=float("inf"), failed_nodes=failed,
                         infeasible_nodes=infeasible, bound_violations=0,
                         message=why)

    status = BnbStatus.OPTIMAL
    while heap:
        if heap[0][0] >= cutoff():
            break                      # nothing open can beat the incumbent
        if explored >= opt.max_nodes:
            status = BnbStatus.NODE_LIMIT
            messages.append(f"node limit {opt.max_nodes} reached")
            break
        _, neg_depth, _, modes, res, per_slot = heappop(heap)
        depth = -neg_depth
        n, t = np.unravel_index(int(np.argmax(per_slot)), per_slot.shape)
        for mode, pinned_idx in (
                (Mode.CHARGE_ONLY, res.problem.layout.pdc_idx[n, t]),
                (Mode.DISCHARGE_ONLY, res.problem.layout.pch_idx[n, t])):
            child = modes.copy()
            child[n, t] = int(mode)
            x0 = res.solution.x.copy()
            x0[pinned_idx] = 0.0
            solve_node(child, x0, res.objective, depth + 1)

    if incumbent is None:
        return BnbResult(status=BnbStatus.NO_SOLUTION, solution=None,
                         duals=None, objective=float("nan"),
                         nodes_explored=explored, gap=float("inf"),
                         failed_nodes=failed, infeasible_nodes=infeasible,
                         bound_violations=bound_violations,
                         message="; ".join(messages) or
                                 "no mode-feasible point found")

    obj, sol, duals = incumbent
    gap = 0.0
    if heap and heap[0][0] < obj:
        gap = (obj - heap[0][0]) / max(1.0, abs(obj))
    return BnbResult(status=status, solution=sol, duals=duals, objective=obj,
                     nodes_explored=explored, gap=gap, failed_nodes=failed,
                     infeasible_nodes=infeasible,
                     bound_violations=bound_violations,
                     message="; ".join(messages))
