"""Dispatch problems: the surrogate MILP and the power-flow benchmarks.

All quantities are per unit. The surrogate problem chooses DG utilization
``lam`` so that the calibrated quantile prediction of the maximum
violation stays non-positive while minimizing the expected purchase
``sum(pd) + p_loss(x) - sum(lam * g_bar)``. The benchmarks replace the
learned models by LinDistFlow constraints: enforced on every sampled
scenario (B1), on all but a budget of them (B1-SAA), or at zero
uncertainty only (B3).
"""

from __future__ import annotations

import heapq
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import RadialNetwork, lindistflow
from .milp import (
    BINARY,
    MilpOptions,
    MilpProblem,
    encode_mlp,
    propagate_bounds,
    relative_gap,
    solve_lp,
    solve_milp,
)
from .neural import MlpModel, forward
from .uncertainty import STREAM_SCENARIO, OmegaSpec, sample_omega

METHODS = ("P3", "B1", "B1-SAA", "B3")
POLYGON_SIDES = 8


class OptError(ValueError):
    pass


def demand_instance(net: RadialNetwork, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nominal demand scaled uniformly (p.u., non-slack buses)."""
    if not scale >= 0:
        raise OptError("demand scale must be non-negative")
    return net.pd_pu * scale, net.qd_pu * scale


def feature_map(net: RadialNetwork, pd, qd) -> tuple[np.ndarray, np.ndarray]:
    """``(A, x0)`` with nominal features ``x = A @ lam + x0``."""
    n = net.n_nonslack
    x0 = np.concatenate([-np.asarray(pd, dtype=float), -np.asarray(qd, dtype=float)])
    A = np.zeros((2 * n, net.n_dg))
    for k, (pos, g, phi) in enumerate(zip(net.dg_positions, net.g_bar_pu, net.phi)):
        A[pos, k] += g
        A[n + pos, k] += phi * g
    return A, x0


@dataclass
class DispatchResult:
    method: str
    epsilon: float
    lam: np.ndarray | None
    expected_G: float
    status: str
    gap: float = 0.0
    wall_time: float = 0.0
    nodes: int = 0
    n_binaries: int = 0
    message: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise OptError(f"unknown method {self.method!r}")
        if self.lam is not None:
            self.lam = np.asarray(self.lam, dtype=float)
            if np.any(self.lam < -1e-9) or np.any(self.lam > 1 + 1e-9):
                raise OptError("utilization outside [0, 1]")
            self.lam = np.clip(self.lam, 0.0, 1.0)

    @property
    def ok(self) -> bool:
        return self.lam is not None and self.status in ("optimal", "gap_limit", "node_limit")

    def row(self) -> dict:
        out = {"method": self.method, "epsilon": self.epsilon}
        lam = self.lam if self.lam is not None else []
        for k, v in enumerate(lam):
            out[f"lambda_{k + 1}"] = float(v)
        out.update(expected_G=self.expected_G, status=self.status, gap=self.gap,
                   wall_time=self.wall_time, nodes=self.nodes, binaries=self.n_binaries)
        return out


def _result_from_milp(method, eps, sol, lam_vars, n_bin, G_fn, msg=""):
    if not sol.has_solution:
        hint = msg if sol.status == "infeasible" else sol.message
        return DispatchResult(method, eps, None, math.nan, sol.status, sol.gap, sol.wall_time,
                              sol.nodes, n_bin, hint)
    lam = np.clip(sol.x[lam_vars], 0.0, 1.0)
    return DispatchResult(method, eps, lam, G_fn(lam, sol), sol.status, sol.gap, sol.wall_time,
                          sol.nodes, n_bin, sol.message)


# -- surrogate problem --------------------------------------------------------

@dataclass
class CaseSetup:
    network: RadialNetwork
    pd: np.ndarray
    qd: np.ndarray
    epsilon: float
    rho: float
    quantile_model: MlpModel
    loss_model: MlpModel
    feature_box: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise OptError("risk level must lie in (0, 1)")
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise OptError("calibration shift must be finite and non-negative")
        if self.quantile_model.role != "quantile" or self.loss_model.role != "loss":
            raise OptError("expected a quantile model and a loss model")
        try:
            self.quantile_model.head(self.epsilon)
        except ValueError as exc:
            raise OptError(str(exc)) from None
        self.pd = np.asarray(self.pd, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.pd.shape != (self.network.n_nonslack,) or self.qd.shape != self.pd.shape:
            raise OptError("demand must give one value per non-slack bus")

    @property
    def head(self) -> int:
        return self.quantile_model.head(self.epsilon)

    def features(self, lam) -> np.ndarray:
        A, x0 = feature_map(self.network, self.pd, self.qd)
        return A @ np.asarray(lam, dtype=float) + x0

    def expected_purchase(self, lam) -> float:
        lam = np.asarray(lam, dtype=float)
        loss = forward(self.loss_model, self.features(lam))[0]
        return float(np.sum(self.pd) + loss - np.sum(lam * self.network.g_bar_pu))

    def surrogate_violation(self, lam) -> float:
        return float(forward(self.quantile_model, self.features(lam))[self.head] + self.rho)


@dataclass
class P3Model:
    problem: MilpProblem
    lam_vars: list[int]
    n_binaries: int
    n_unstable: int
    quantile_expr: tuple[dict[int, float], float]
    loss_expr: tuple[dict[int, float], float]


def build_p3(setup: CaseSetup, lo=None, hi=None) -> P3Model:
    """Surrogate MILP over the utilization box ``[lo, hi]`` (default ``[0, 1]``).

    Neuron bounds are propagated over the given box, so a smaller box gives
    a tighter encoding of the same problem restricted to that box.
    """
    net = setup.network
    A, x0 = feature_map(net, setup.pd, setup.qd)
    d = net.n_dg
    lo = np.zeros(d) if lo is None else np.asarray(lo, dtype=float)
    hi = np.ones(d) if hi is None else np.asarray(hi, dtype=float)
    if lo.shape != (d,) or hi.shape != (d,) or np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
        raise OptError("utilization box must lie within [0, 1]")
    if setup.feature_box is not None:
        corners = np.array([A @ np.where(c, hi, lo) + x0 for c in np.ndindex(*(2,) * d)])
        flo, fhi = setup.feature_box
        if np.any(corners < np.asarray(flo) - 1e-12) or np.any(corners > np.asarray(fhi) + 1e-12):
            warnings.warn("solve-time features leave the training box; surrogate accuracy is not covered",
                          stacklevel=2)
    p = MilpProblem("p3")
    lam = [p.add_var(f"lam_{k + 1}", float(lo[k]), float(hi[k])) for k in range(d)]
    qb = propagate_bounds(setup.quantile_model, lo, hi, affine=(A, x0))
    lb = propagate_bounds(setup.loss_model, lo, hi, affine=(A, x0))
    qenc = encode_mlp(p, setup.quantile_model, qb, lam, prefix="q", affine=(A, x0))
    lenc = encode_mlp(p, setup.loss_model, lb, lam, prefix="l", affine=(A, x0))
    q_terms, q_const = qenc.outputs[setup.head]
    p.add_constraint(q_terms, "<=", -setup.rho - q_const, "chance")
    l_terms, l_const = lenc.outputs[0]
    obj = dict(l_terms)
    for k, v in enumerate(lam):
        obj[v] = obj.get(v, 0.0) - float(net.g_bar_pu[k])
    p.set_objective(obj, float(np.sum(setup.pd)) + l_const)
    return P3Model(p, lam, len(qenc.binaries) + len(lenc.binaries), qb.n_unstable + lb.n_unstable,
                   (q_terms, q_const), (l_terms, l_const))


@dataclass
class P3Options:
    """``leaf_unstable``: boxes with at most this many unstable neurons go
    straight to branch and bound; ``min_width``: boxes this narrow are
    never split further; ``seed_points``: lattice points per axis tried
    for a first incumbent."""

    milp: MilpOptions = field(default_factory=MilpOptions)
    leaf_unstable: int = 12
    min_width: float = 1.0 / 256
    time_limit: float = math.inf
    seed_points: int = 33


def solve_p3(setup: CaseSetup, options: P3Options | None = None) -> DispatchResult:
    """Solve the surrogate problem exactly by splitting the utilization box.

    Boxes are explored best-first on the LP bound of their MILP. A box is
    either pruned against the incumbent, split in half along its widest
    side, or (once few neurons remain unstable) solved by branch and bound.
    Every forward pass at a relaxation point that satisfies the surrogate
    constraint is also a feasible MILP point and updates the incumbent.
    """
    opts = options or P3Options()
    t0 = time.perf_counter()
    d = setup.network.n_dg
    full = build_p3(setup)
    counter = 0
    nodes = 0
    inc_lam, inc_obj = None, math.inf
    gap_tol = opts.milp.gap
    heap: list = []
    status, msg = "optimal", ""

    def offer(lam):
        nonlocal inc_lam, inc_obj
        lam = np.clip(lam, 0.0, 1.0)
        if setup.surrogate_violation(lam) <= 0.0:
            g = setup.expected_purchase(lam)
            if g < inc_obj:
                inc_lam, inc_obj = lam, g

    def push(lo, hi):
        nonlocal counter, nodes
        model = build_p3(setup, lo, hi)
        sol = solve_lp(model.problem)
        nodes += 1
        if sol.status == "infeasible":
            return
        if sol.status != "optimal":
            raise OptError(f"relaxation failed in a utilization box: {sol.status}")
        offer(sol.x[model.lam_vars])
        counter += 1
        heapq.heappush(heap, (sol.objective, counter, lo, hi, model))

    # a coarse lattice of forward passes gives the first incumbent
    if opts.seed_points > 1:
        axes = [np.linspace(0.0, 1.0, opts.seed_points)] * d
        L = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        A, x0 = feature_map(setup.network, setup.pd, setup.qd)
        X = L @ A.T + x0
        ok = forward(setup.quantile_model, X)[:, setup.head] + setup.rho <= 0.0
        if ok.any():
            G = np.sum(setup.pd) + forward(setup.loss_model, X[ok])[:, 0] - L[ok] @ setup.network.g_bar_pu
            offer(L[ok][int(np.argmin(G))])
    push(np.zeros(d), np.ones(d))
    while heap:
        bound = heap[0][0]
        if relative_gap(inc_obj, bound) <= gap_tol:
            break
        if time.perf_counter() - t0 > opts.time_limit:
            status, msg = "node_limit", "time limit reached"
            break
        _, _, lo, hi, model = heapq.heappop(heap)
        width = hi - lo
        if model.n_unstable <= opts.leaf_unstable or width.max() <= opts.min_width:
            sol = solve_milp(model.problem, opts.milp)
            nodes += sol.nodes
            if sol.status == "node_limit":
                status, msg = "node_limit", sol.message
            if sol.has_solution:
                offer(sol.x[model.lam_vars])
                if sol.objective < inc_obj and setup.surrogate_violation(sol.x[model.lam_vars]) <= 1e-9:
                    inc_lam, inc_obj = np.clip(sol.x[model.lam_vars], 0, 1), sol.objective
            continue
        k = int(np.argmax(width))
        mid = 0.5 * (lo[k] + hi[k])
        left_hi, right_lo = hi.copy(), lo.copy()
        left_hi[k], right_lo[k] = mid, mid
        push(lo, left_hi)
        push(right_lo, hi)
    bound = min(heap[0][0], inc_obj) if heap else inc_obj
    wall = time.perf_counter() - t0
    if inc_lam is None:
        if status == "optimal":
            return DispatchResult("P3", setup.epsilon, None, math.nan, "infeasible", math.inf, wall, nodes,
                                  full.n_binaries, "surrogate problem infeasible: the risk level and "
                                  "calibration shift may be incompatible")
        return DispatchResult("P3", setup.epsilon, None, math.nan, status, math.inf, wall, nodes,
                              full.n_binaries, msg)
    gap = relative_gap(inc_obj, bound)
    if status == "optimal" and gap > gap_tol:
        status = "gap_limit"
    res = DispatchResult("P3", setup.epsilon, inc_lam, setup.expected_purchase(inc_lam), status, gap,
                         wall, nodes, full.n_binaries, msg)
    res.details = {
        "milp_objective": inc_obj,
        "bound": bound,
        "surrogate_violation": setup.surrogate_violation(inc_lam),
        "unstable_neurons": full.n_unstable,
    }
    return res


def solve_p3_direct(setup: CaseSetup, options: MilpOptions | None = None) -> DispatchResult:
    """Solve the monolithic MILP from :func:`build_p3` by branch and bound."""
    t0 = time.perf_counter()
    model = build_p3(setup)
    sol = solve_milp(model.problem, options)
    res = _result_from_milp(
        "P3", setup.epsilon, sol, model.lam_vars, model.n_binaries,
        lambda lam, s: setup.expected_purchase(lam),
        msg="surrogate problem infeasible: the risk level and calibration shift may be incompatible",
    )
    res.wall_time = time.perf_counter() - t0
    if res.lam is not None:
        res.details = {"milp_objective": sol.objective, "surrogate_violation": setup.surrogate_violation(res.lam)}
    return res


# -- LinDistFlow benchmarks ---------------------------------------------------

def scenario_count(eps: float, beta: float, d: int) -> int:
    """``ceil((2 / eps) * (ln(1 / beta) + d))`` sampled scenarios."""
    if not (0 < eps < 1 and 0 < beta < 1) or d < 1:
        raise OptError("need eps, beta in (0, 1) and a positive dimension")
    return math.ceil((2.0 / eps) * (math.log(1.0 / beta) + d) - 1e-9)


def lindist_rows(net: RadialNetwork, pd, qd, omega) -> tuple[np.ndarray, np.ndarray]:
    """LinDistFlow limits for one uncertainty draw as ``G @ lam <= h``.

    Voltages must stay in the band; branch apparent power is kept inside a
    regular polygon inscribed in the circle of radius ``Imax`` (1 p.u.
    voltage), which is conservative for the current limit.
    """
    ld = lindistflow(net)
    omega = np.asarray(omega, dtype=float)
    A, x0 = feature_map(net, pd, qd)
    n = net.n_nonslack
    scale = 1.0 + omega
    Ap, Aq = A[:n] * scale, A[n:] * scale
    p0, q0 = x0[:n], x0[n:]
    v_c = ld.v2_0 + ld.v2_p @ p0 + ld.v2_q @ q0
    v_G = ld.v2_p @ Ap + ld.v2_q @ Aq
    P_c, P_G = ld.flow_p @ p0, ld.flow_p @ Ap
    Q_c, Q_G = ld.flow_q @ q0, ld.flow_q @ Aq
    G = [v_G, -v_G]
    h = [net.v_max**2 - v_c, v_c - net.v_min**2]
    th = 2 * np.pi * np.arange(POLYGON_SIDES) / POLYGON_SIDES
    apothem = net.i_max_pu * np.cos(np.pi / POLYGON_SIDES)
    for c, s in zip(np.cos(th), np.sin(th)):
        G.append(c * P_G + s * Q_G)
        h.append(apothem - c * P_c - s * Q_c)
    return np.vstack(G), np.concatenate(h)


def _box_max(G, lo, hi):
    return np.maximum(G * lo, G * hi).sum(axis=1)


def _clip(poly: np.ndarray, g: np.ndarray, h: float) -> np.ndarray:
    """Clip a convex polygon (vertices in order) by ``g @ v <= h``."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        fa, fb = g @ a - h, g @ b - h
        if fa <= 0:
            out.append(a)
        if (fa < 0 < fb) or (fb < 0 < fa):
            t = fa / (fa - fb)
            out.append(a + t * (b - a))
    return np.array(out).reshape(-1, 2)


def prune_rows(G: np.ndarray, h: np.ndarray, lo, hi, tol: float = 1e-9) -> np.ndarray:
    """Indices of rows needed to describe ``{lam in box : G lam <= h}``.

    Rows that hold on the whole box are dropped. In two dimensions the
    region is clipped exactly and only rows touching it are kept.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    keep = np.flatnonzero(_box_max(G, lo, hi) > h + tol)
    if G.shape[1] != 2 or len(keep) == 0:
        return keep
    poly = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    for i in keep:
        poly = _clip(poly, G[i], h[i])
        if len(poly) == 0:
            return keep
    scale = 1.0 + np.abs(h[keep])
    touch = np.max(poly @ G[keep].T - h[keep], axis=0) >= -1e-7 * scale
    return keep[touch]


def _lindist_lp(method, eps, net, pd, qd, omegas) -> DispatchResult:
    t0 = time.perf_counter()
    d = net.n_dg
    rows = [lindist_rows(net, pd, qd, w) for w in np.atleast_2d(omegas)]
    G = np.vstack([r[0] for r in rows])
    h = np.concatenate([r[1] for r in rows])
    keep = prune_rows(G, h, np.zeros(d), np.ones(d))
    p = MilpProblem(method.lower().replace("-", "_"))
    lam = [p.add_var(f"lam_{k + 1}", 0.0, 1.0) for k in range(d)]
    for i in keep:
        p.add_constraint(dict(zip(lam, G[i])), "<=", float(h[i]))
    p.set_objective(dict(zip(lam, -net.g_bar_pu)), float(np.sum(pd)))
    sol = solve_lp(p)
    res = _result_from_milp(method, eps, sol, lam, 0, lambda lam_, s: s.objective,
                            msg="LinDistFlow limits cannot be met on the sampled scenarios")
    res.wall_time = time.perf_counter() - t0
    res.details = {"scenarios": len(rows), "rows": int(len(keep))}
    return res


def draw_scenarios(spec: OmegaSpec, n: int, seed: int, n_dg: int) -> np.ndarray:
    """Uncertainty scenarios for the benchmarks (own random stream)."""
    return sample_omega(spec, n, seed, n_dg, stream=STREAM_SCENARIO)


def solve_b1_scenario(net: RadialNetwork, pd, qd, eps: float, spec: OmegaSpec,
                      beta: float = 0.05, seed: int = 0) -> DispatchResult:
    """Scenario approach: LinDistFlow limits on ``scenario_count`` draws."""
    n = scenario_count(eps, beta, net.n_dg)
    res = solve_b1_on(net, pd, qd, eps, draw_scenarios(spec, n, seed, net.n_dg))
    res.details["beta"] = beta
    return res


def solve_b1_on(net: RadialNetwork, pd, qd, eps: float, omegas: np.ndarray) -> DispatchResult:
    """LinDistFlow limits enforced on every supplied scenario."""
    return _lindist_lp("B1", eps, net, pd, qd, omegas)


def solve_risk_neutral(net: RadialNetwork, pd, qd) -> DispatchResult:
    """LinDistFlow dispatch at zero uncertainty."""
    return _lindist_lp("B3", 0.0, net, pd, qd, np.zeros((1, net.n_dg)))


def solve_b1_saa(net: RadialNetwork, pd, qd, eps: float, omegas: np.ndarray,
                 options: MilpOptions | None = None) -> DispatchResult:
    """LinDistFlow limits on all but ``floor(eps * N)`` scenarios.

    Scenario ``s`` may be violated when its binary is one; each of its rows
    is then relaxed by the largest excess the row can reach over the
    utilization box.
    """
    if not 0 <= eps < 1:
        raise OptError("risk level must lie in [0, 1)")
    t0 = time.perf_counter()
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    N, d = omegas.shape[0], net.n_dg
    lo, hi = np.zeros(d), np.ones(d)
    p = MilpProblem("b1_saa")
    lam = [p.add_var(f"lam_{k + 1}", 0.0, 1.0) for k in range(d)]
    z = [p.add_var(f"z_{s}", 0, 1, BINARY) for s in range(N)]
    n_rows = 0
    for s, w in enumerate(omegas):
        G, h = lindist_rows(net, pd, qd, w)
        keep = prune_rows(G, h, lo, hi)
        big_m = _box_max(G[keep], lo, hi) - h[keep]
        for i, m in zip(keep, big_m):
            row = dict(zip(lam, G[i]))
            row[z[s]] = -float(m)
            p.add_constraint(row, "<=", float(h[i]), f"s{s}_r{i}")
            n_rows += 1
    budget = math.floor(eps * N + 1e-9)
    p.add_constraint({v: 1.0 for v in z}, "<=", budget, "budget")
    p.set_objective(dict(zip(lam, -net.g_bar_pu)), float(np.sum(pd)))
    sol = solve_milp(p, options)
    res = _result_from_milp("B1-SAA", eps, sol, lam, N, lambda lam_, s_: s_.objective,
                            msg="LinDistFlow limits cannot be met within the violation budget")
    res.wall_time = time.perf_counter() - t0
    res.details = {"scenarios": N, "rows": n_rows, "budget": budget}
    if sol.has_solution:
        res.details["violated"] = [int(s) for s in range(N) if sol.x[z[s]] > 0.5]
    return res

