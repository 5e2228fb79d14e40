"""Bounded-variable simplex for equality-form linear programs.

The engine solves ``min c x  s.t.  A x = b,  lb <= x <= ub`` with a dense
explicit basis inverse. Cold starts run a two-phase primal simplex (slack
columns seed the basis where they can, artificials elsewhere); after a
bound change a dual simplex restarts from the previous optimal basis.
Dantzig pricing switches to Bland's rule after 1000 consecutive
degenerate pivots.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .problem import MilpProblem, MilpSolution

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
LIMIT = "iteration_limit"

PRIMAL_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-9
DEGENERATE_LIMIT = 1000
REFACTOR_EVERY = 50

_LB, _UB, _FREE, _BASIC = 0, 1, 2, 3


class BoundedSimplex:
    def __init__(self, A, b, c, lb, ub, slack_cols: dict[int, int] | None = None,
                 max_iter: int | None = None) -> None:
        A = np.asarray(A, dtype=float)
        m, n = A.shape
        self.m, self.n = m, n
        # one artificial column per row, pinned to zero outside phase one
        self.A = np.hstack([A, np.eye(m)])
        self.b = np.asarray(b, dtype=float).copy()
        self.c = np.concatenate([np.asarray(c, dtype=float), np.zeros(m)])
        self.lb = np.concatenate([np.asarray(lb, dtype=float), np.zeros(m)])
        self.ub = np.concatenate([np.asarray(ub, dtype=float), np.zeros(m)])
        self.slack_cols = slack_cols or {}
        self.max_iter = max_iter or 50 * (m + n) + 1000
        self.iterations = 0  # cumulative, for statistics
        self._budget_end = self.max_iter
        self.bland = False
        self.basis = np.zeros(m, dtype=np.int64)
        self.state = np.zeros(n + m, dtype=np.int8)
        self.x = np.zeros(n + m)
        self.Binv = np.eye(m)
        self._since_refactor = 0
        self._ready = False

    # -- helpers ----------------------------------------------------------
    def _place(self, j: int) -> None:
        """Put nonbasic column ``j`` at its preferred bound."""
        st = self.state[j]
        if st == _UB and self.ub[j] < math.inf:
            self.x[j] = self.ub[j]
        elif self.lb[j] > -math.inf:
            self.x[j], self.state[j] = self.lb[j], _LB
        elif self.ub[j] < math.inf:
            self.x[j], self.state[j] = self.ub[j], _UB
        else:
            self.x[j], self.state[j] = 0.0, _FREE

    def refactor(self) -> None:
        if self.m:
            self.Binv = np.linalg.inv(self.A[:, self.basis])
        xn = self.x.copy()
        xn[self.basis] = 0.0
        self.x[self.basis] = self.Binv @ (self.b - self.A @ xn)
        self._since_refactor = 0

    def _pivot(self, r: int, alpha: np.ndarray) -> None:
        row = self.Binv[r] / alpha[r]
        self.Binv -= np.outer(alpha, row)
        self.Binv[r] = row
        self._since_refactor += 1

    def reduced_costs(self, cost: np.ndarray) -> np.ndarray:
        y = cost[self.basis] @ self.Binv
        d = cost - y @ self.A
        d[self.basis] = 0.0
        return d

    def _dual_infeasible(self, d: np.ndarray) -> np.ndarray:
        movable = self.ub > self.lb
        st = self.state
        return movable & (((st == _LB) & (d < -DUAL_TOL)) | ((st == _UB) & (d > DUAL_TOL))
                          | ((st == _FREE) & (np.abs(d) > DUAL_TOL)))

    def primal_infeasibility(self) -> float:
        xb = self.x[self.basis]
        lo, hi = self.lb[self.basis], self.ub[self.basis]
        if not self.m:
            return 0.0
        return float(max(np.max(lo - xb), np.max(xb - hi), 0.0))

    @property
    def objective(self) -> float:
        return float(self.c[: self.n] @ self.x[: self.n])

    def solution(self) -> np.ndarray:
        return self.x[: self.n].copy()

    # -- primal simplex ---------------------------------------------------
    def _start_budget(self) -> None:
        self._budget_end = self.iterations + self.max_iter

    def _primal(self, cost: np.ndarray) -> str:
        degenerate = 0
        while True:
            if self.iterations >= self._budget_end:
                return LIMIT
            if self._since_refactor >= REFACTOR_EVERY:
                self.refactor()
            d = self.reduced_costs(cost)
            movable = self.ub > self.lb
            st = self.state
            up = movable & ((st == _LB) | (st == _FREE)) & (d < -DUAL_TOL)
            dn = movable & ((st == _UB) | (st == _FREE)) & (d > DUAL_TOL)
            elig = up | dn
            if not elig.any():
                return OPTIMAL
            if self.bland:
                j = int(np.flatnonzero(elig)[0])
            else:
                j = int(np.argmax(np.where(elig, np.abs(d), -1.0)))
            sigma = 1.0 if up[j] else -1.0
            alpha = self.Binv @ self.A[:, j]
            delta = -sigma * alpha
            xb = self.x[self.basis]
            lo, hi = self.lb[self.basis], self.ub[self.basis]
            ratios = np.full(self.m, math.inf)
            dec, inc = delta < -PIVOT_TOL, delta > PIVOT_TOL
            ratios[dec] = (xb[dec] - lo[dec]) / -delta[dec]
            ratios[inc] = (hi[inc] - xb[inc]) / delta[inc]
            ratios = np.maximum(ratios, 0.0)
            t_min = float(ratios.min()) if self.m else math.inf
            t_flip = self.ub[j] - self.lb[j]
            if t_flip <= t_min:
                if t_flip == math.inf:
                    return UNBOUNDED
                step = t_flip
                self.x[self.basis] += delta * step
                if sigma > 0:
                    self.x[j], self.state[j] = self.ub[j], _UB
                else:
                    self.x[j], self.state[j] = self.lb[j], _LB
            else:
                ties = np.flatnonzero(ratios <= t_min + 1e-12)
                if self.bland:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                step = float(ratios[r])
                self.x[self.basis] += delta * step
                self.x[j] += sigma * step
                leave = self.basis[r]
                if delta[r] < 0:
                    self.x[leave], self.state[leave] = self.lb[leave], _LB
                else:
                    self.x[leave], self.state[leave] = self.ub[leave], _UB
                self.basis[r] = j
                self.state[j] = _BASIC
                self._pivot(r, alpha)
            self.iterations += 1
            if step <= 1e-12:
                degenerate += 1
                if degenerate >= DEGENERATE_LIMIT:
                    self.bland = True
            else:
                degenerate = 0

    # -- dual simplex -----------------------------------------------------
    def _dual(self) -> str:
        degenerate = 0
        while True:
            if self.iterations >= self._budget_end:
                return LIMIT
            if self._since_refactor >= REFACTOR_EVERY:
                self.refactor()
            if not self.m:
                return OPTIMAL
            xb = self.x[self.basis]
            below = self.lb[self.basis] - xb
            above = xb - self.ub[self.basis]
            viol = np.maximum(below, above)
            r = int(np.argmax(viol))
            if viol[r] <= PRIMAL_TOL:
                return OPTIMAL
            if self.bland:
                rows = np.flatnonzero(viol > PRIMAL_TOL)
                r = int(rows[np.argmin(self.basis[rows])])
            to_lower = below[r] >= above[r]
            target = self.lb[self.basis[r]] if to_lower else self.ub[self.basis[r]]
            d = self.reduced_costs(self.c)
            row = self.Binv[r] @ self.A
            movable = self.ub > self.lb
            st = self.state
            at_lo = (st == _LB) | (st == _FREE)
            at_hi = (st == _UB) | (st == _FREE)
            if to_lower:
                cand = (at_lo & (row < -PIVOT_TOL)) | (at_hi & (row > PIVOT_TOL))
            else:
                cand = (at_lo & (row > PIVOT_TOL)) | (at_hi & (row < -PIVOT_TOL))
            cand &= movable & (st != _BASIC)
            if not cand.any():
                return INFEASIBLE
            idx = np.flatnonzero(cand)
            ratio = np.abs(d[idx]) / np.abs(row[idx])
            best = ratio.min()
            ties = idx[ratio <= best + 1e-12]
            if self.bland:
                j = int(ties[0])
            else:
                j = int(ties[np.argmax(np.abs(row[ties]))])
            dxj = (xb[r] - target) / row[j]
            alpha = self.Binv @ self.A[:, j]
            self.x[self.basis] -= alpha * dxj
            self.x[j] += dxj
            leave = self.basis[r]
            self.x[leave] = target
            self.state[leave] = _LB if to_lower else _UB
            self.basis[r] = j
            self.state[j] = _BASIC
            self._pivot(r, alpha)
            self.iterations += 1
            if best <= 1e-12:
                degenerate += 1
                if degenerate >= DEGENERATE_LIMIT:
                    self.bland = True
            else:
                degenerate = 0

    # -- drivers ----------------------------------------------------------
    def solve(self) -> str:
        """Cold start: phase one on artificials, then phase two."""
        n, m = self.n, self.m
        self.bland = False
        self._start_budget()
        self.state[:] = _LB
        for j in range(n + m):
            self._place(j)
        resid = self.b - self.A[:, :n] @ self.x[:n]
        phase_cost = np.zeros(n + m)
        for i in range(m):
            j = self.slack_cols.get(i)
            if j is not None:
                v = self.x[j] + resid[i] / self.A[i, j]
                if self.lb[j] - PRIMAL_TOL <= v <= self.ub[j] + PRIMAL_TOL:
                    self.basis[i], self.x[j], self.state[j] = j, v, _BASIC
                    continue
            a = n + i
            self.basis[i], self.x[a], self.state[a] = a, resid[i], _BASIC
            if resid[i] >= 0:
                self.lb[a], self.ub[a], phase_cost[a] = 0.0, math.inf, 1.0
            else:
                self.lb[a], self.ub[a], phase_cost[a] = -math.inf, 0.0, -1.0
        self.refactor()
        if phase_cost.any():
            status = self._primal(phase_cost)
            if status == LIMIT:
                return LIMIT
            infeas = float(np.sum(np.abs(self.x[n:])))
            self.lb[n:] = 0.0
            self.ub[n:] = 0.0
            for a in range(n, n + m):
                if self.state[a] != _BASIC:
                    self.x[a], self.state[a] = 0.0, _LB
            scale = max(1.0, float(np.max(np.abs(self.b), initial=0.0)))
            if infeas > 1e-8 * scale:
                self._ready = False
                return INFEASIBLE
            self.refactor()
        status = self._primal(self.c)
        self._ready = status == OPTIMAL
        return status

    def snapshot(self):
        return self.basis.copy(), self.state.copy()

    def set_bounds(self, lb, ub) -> None:
        self.lb[: self.n] = lb
        self.ub[: self.n] = ub

    def resolve(self, snapshot=None) -> str:
        """Re-optimize after bound changes, warm-starting from ``snapshot``
        (or the current basis) with the dual simplex."""
        if snapshot is not None:
            self.basis[:], self.state[:] = snapshot
            self._ready = True
        if not self._ready:
            return self.solve()
        self.bland = False
        self._start_budget()
        for j in np.flatnonzero(self.state != _BASIC):
            self._place(int(j))
        try:
            self.refactor()
        except np.linalg.LinAlgError:
            return self.solve()
        for _ in range(3):
            d = self.reduced_costs(self.c)
            if self._dual_infeasible(d).any():
                if self.primal_infeasibility() > PRIMAL_TOL:
                    return self.solve()
                status = self._primal(self.c)
            else:
                status = self._dual()
            if status != OPTIMAL:
                if status == INFEASIBLE:
                    self._ready = True
                return status
            self.refactor()
            if self.primal_infeasibility() <= PRIMAL_TOL and not self._dual_infeasible(
                self.reduced_costs(self.c)
            ).any():
                return OPTIMAL
        return self.solve()


@dataclass
class LpResult:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int


class LpRelaxation:
    """Equality-form relaxation of a :class:`MilpProblem` with a reusable
    engine. Variables fixed in the problem are folded into the right-hand
    side; each inequality row receives a unit slack column."""

    def __init__(self, problem: MilpProblem) -> None:
        self.problem = problem
        lb, ub = problem.bounds()
        c = problem.cost_vector()
        A = problem.matrix()
        b = np.array([r.rhs for r in problem.constraints], dtype=float)
        senses = [r.sense for r in problem.constraints]
        fixed = lb == ub
        self.keep = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        self.fixed_values = lb[fixed]
        b = b - A[:, fixed] @ lb[fixed]
        self.constant = problem.objective_constant + float(c[fixed] @ lb[fixed])
        A = A[:, self.keep]
        empty = ~A.any(axis=1)
        self.trivially_infeasible = False
        for i in np.flatnonzero(empty):
            s, v = senses[i], b[i]
            if (s == "<=" and v < -1e-9) or (s == ">=" and v > 1e-9) or (s == "=" and abs(v) > 1e-9):
                self.trivially_infeasible = True
        rows = np.flatnonzero(~empty)
        A, b = A[rows], b[rows]
        senses = [senses[i] for i in rows]
        ineq = [i for i, s in enumerate(senses) if s != "="]
        nk = len(self.keep)
        S = np.zeros((len(rows), len(ineq)))
        slack_cols = {}
        for k, i in enumerate(ineq):
            S[i, k] = 1.0 if senses[i] == "<=" else -1.0
            slack_cols[i] = nk + k
        self.engine = BoundedSimplex(
            np.hstack([A, S]), b,
            np.concatenate([c[self.keep], np.zeros(len(ineq))]),
            np.concatenate([lb[self.keep], np.zeros(len(ineq))]),
            np.concatenate([ub[self.keep], np.full(len(ineq), math.inf)]),
            slack_cols,
        )
        self.n_slack = len(ineq)
        self._pos = {int(j): k for k, j in enumerate(self.keep)}

    def column(self, var: int) -> int | None:
        return self._pos.get(int(var))

    def set_bounds(self, lb: np.ndarray, ub: np.ndarray) -> None:
        """Bounds for all problem variables (fixed ones are ignored)."""
        inf = np.full(self.n_slack, math.inf)
        self.engine.set_bounds(np.concatenate([lb[self.keep], np.zeros(self.n_slack)]),
                               np.concatenate([ub[self.keep], inf]))

    def _result(self, status: str) -> LpResult:
        if status != OPTIMAL:
            return LpResult(status, None, math.nan, self.engine.iterations)
        x = np.empty(self.problem.n_vars)
        x[self.fixed] = self.fixed_values
        x[self.keep] = self.engine.x[: len(self.keep)]
        return LpResult(status, x, self.constant + float(self.engine.c[: len(self.keep)] @ x[self.keep]),
                        self.engine.iterations)

    def solve(self) -> LpResult:
        if self.trivially_infeasible:
            return LpResult(INFEASIBLE, None, math.nan, 0)
        return self._result(self.engine.solve())

    def resolve(self, snapshot=None) -> LpResult:
        if self.trivially_infeasible:
            return LpResult(INFEASIBLE, None, math.nan, 0)
        return self._result(self.engine.resolve(snapshot))


def solve_lp(problem: MilpProblem) -> MilpSolution:
    """Solve the continuous relaxation (binaries range over [0, 1])."""
    t0 = time.perf_counter()
    res = LpRelaxation(problem).solve()
    status = {LIMIT: "node_limit"}.get(res.status, res.status)
    msg = "pivot budget exhausted" if res.status == LIMIT else ""
    if res.status != OPTIMAL:
        return MilpSolution(status, iterations=res.iterations, wall_time=time.perf_counter() - t0,
                            message=msg)
    return MilpSolution(OPTIMAL, res.objective, res.x, res.objective, 0.0, 1, res.iterations,
                        time.perf_counter() - t0)
