"""Best-bound branch and bound over the simplex relaxation."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass

import numpy as np

from .problem import GAP_TOL, INT_TOL, MilpProblem, MilpSolution
from .simplex import INFEASIBLE, LIMIT, OPTIMAL, UNBOUNDED, LpRelaxation


@dataclass
class MilpOptions:
    gap: float = GAP_TOL
    node_limit: int = 200_000
    time_limit: float = math.inf

    def __post_init__(self) -> None:
        if self.gap < 0 or self.node_limit < 1 or not self.time_limit > 0:
            raise ValueError("invalid solver limits")


def relative_gap(incumbent: float, bound: float) -> float:
    """``(incumbent - bound) / max(1, |incumbent|)``; the floor at one keeps
    the criterion at least as strict as a plain relative gap near zero."""
    if incumbent == math.inf:
        return math.inf
    return max(0.0, incumbent - bound) / max(1.0, abs(incumbent))


def _polish(relax: LpRelaxation, x, obj, bins, lb0, ub0):
    """Round the incumbent's binaries, fix them and re-solve the LP so the
    continuous part is exact for the integral assignment."""
    if not len(bins):
        return x, obj
    lb, ub = lb0.copy(), ub0.copy()
    lb[bins] = ub[bins] = np.round(x[bins])
    relax.set_bounds(lb, ub)
    res = relax.resolve()
    if res.status == OPTIMAL and res.objective <= obj + GAP_TOL * max(1.0, abs(obj)):
        return res.x, res.objective
    return x, obj


def solve_milp(problem: MilpProblem, options: MilpOptions | None = None) -> MilpSolution:
    """Minimize ``problem`` exactly up to the relative gap.

    Nodes are explored best-bound first (ties by creation order); the
    branching variable is the most fractional binary, lowest index on ties.
    Children are re-optimized with the dual simplex from the parent basis.
    """
    opts = options or MilpOptions()
    t0 = time.perf_counter()
    relax = LpRelaxation(problem)
    bins = np.array([j for j in problem.binary_indices if relax.column(j) is not None], dtype=np.int64)
    lb0, ub0 = problem.bounds()
    log: list[tuple[int, float, float, float]] = []

    def finish(status, x=None, obj=math.nan, bound=-math.inf, nodes=0, msg=""):
        gap = relative_gap(obj, bound) if x is not None else math.inf
        return MilpSolution(status, obj, x, bound, gap, nodes, relax.engine.iterations,
                            time.perf_counter() - t0, log, msg)

    root = relax.solve()
    if root.status == INFEASIBLE:
        return finish("infeasible", msg="root relaxation infeasible")
    if root.status == UNBOUNDED:
        return finish("unbounded", msg="root relaxation unbounded")
    if root.status == LIMIT:
        return finish("node_limit", msg="pivot budget exhausted at the root")

    def fractional(x):
        v = x[bins]
        return np.minimum(v - np.floor(v), np.ceil(v) - v)

    inc_x, inc_obj = None, math.inf
    counter = 0
    heap: list = []
    frac = fractional(root.x)
    if not np.any(frac > INT_TOL):
        log.append((0, root.objective, root.objective, 0.0))
        x, obj = _polish(relax, root.x, root.objective, bins, lb0, ub0)
        return finish("optimal", x, obj, min(obj, root.objective), 1)
    heap.append((root.objective, counter, lb0[bins].copy(), ub0[bins].copy(),
                 relax.engine.snapshot(), root.x))
    nodes = 0
    status, msg = "optimal", ""
    while heap:
        bound = heap[0][0]
        if relative_gap(inc_obj, bound) <= opts.gap:
            break
        if nodes >= opts.node_limit:
            status, msg = "node_limit", "node limit reached"
            break
        if time.perf_counter() - t0 > opts.time_limit:
            status, msg = "node_limit", "time limit reached"
            break
        obj, _, blo, bhi, snap, x = heapq.heappop(heap)
        nodes += 1
        frac = fractional(x)
        k = int(np.argmax(frac))
        for side in (0, 1):
            clo, chi = blo.copy(), bhi.copy()
            if side == 0:
                chi[k] = 0.0
            else:
                clo[k] = 1.0
            lb, ub = lb0.copy(), ub0.copy()
            lb[bins], ub[bins] = clo, chi
            relax.set_bounds(lb, ub)
            res = relax.resolve(snap)
            if res.status == LIMIT:
                status, msg = "node_limit", "pivot budget exhausted in a node"
                continue
            if res.status != OPTIMAL:
                continue
            if relative_gap(inc_obj, res.objective) <= opts.gap or res.objective >= inc_obj:
                continue
            if not np.any(fractional(res.x) > INT_TOL):
                inc_x, inc_obj = res.x, res.objective
                continue
            counter += 1
            heapq.heappush(heap, (res.objective, counter, clo, chi, relax.engine.snapshot(), res.x))
        best = min(heap[0][0], inc_obj) if heap else inc_obj
        log.append((nodes, best, inc_obj, relative_gap(inc_obj, best)))
    bound = min(heap[0][0], inc_obj) if heap else inc_obj
    if inc_x is None:
        if heap or status != "optimal":
            return finish("node_limit", bound=bound, nodes=nodes, msg=msg or "no incumbent")
        return finish("infeasible", nodes=nodes, msg="no integer-feasible point")
    inc_x, inc_obj = _polish(relax, inc_x, inc_obj, bins, lb0, ub0)
    gap = relative_gap(inc_obj, bound)
    if status == "optimal" and gap > GAP_TOL:
        status = "gap_limit"
    return finish(status, inc_x, inc_obj, min(bound, inc_obj), nodes, msg)
