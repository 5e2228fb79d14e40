"""DistFlow power flow on radial networks by backward/forward sweep.

All quantities are per unit.  Injection vectors cover the non-slack buses
in network order; branch quantities follow the network's branch order with
``P``/``Q`` measured at the sending (parent) end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import RadialNetwork

V_TOL = 1e-8
MAX_ITER = 100
RESIDUAL_TOL = 1e-6
BALANCE_TOL = 1e-4


class ConsistencyError(RuntimeError):
    pass


@dataclass
class Injection:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have the same shape")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise ValueError("injections must be finite")


@dataclass
class PowerFlowSolution:
    V: np.ndarray  # non-slack bus voltages
    I: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    p_loss: float
    converged: bool
    iterations: int
    residual: float
    v_slack: float = 1.0
    slack_injection: float = 0.0


@dataclass
class BatchSolution:
    """Row-wise solutions of many power flows sharing one network."""

    V: np.ndarray  # (S, n_nonslack)
    I: np.ndarray  # (S, n_branch)
    P: np.ndarray
    Q: np.ndarray
    p_loss: np.ndarray  # (S,)
    slack_p: np.ndarray  # (S,)
    converged: np.ndarray  # (S,) bool
    iterations: np.ndarray  # (S,) int
    residual: np.ndarray  # (S,)


def _check_lambda_omega(net: RadialNetwork, lam, omega) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if lam.shape[-1:] != (net.n_dg,) or omega.shape[-1:] != (net.n_dg,):
        raise ValueError(f"lambda and omega need one entry per DG ({net.n_dg})")
    if np.any(lam < 0) or np.any(lam > 1) or np.any(~np.isfinite(lam)):
        raise ValueError("DG utilization must lie in [0, 1]")
    if np.any(omega <= -1) or np.any(~np.isfinite(omega)):
        raise ValueError("uncertainty levels must exceed -1")
    return lam, omega


def injections(
    net: RadialNetwork,
    lam: np.ndarray,
    omega: np.ndarray,
    pd: np.ndarray | None = None,
    qd: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized actual injections; leading axes of ``lam``/``omega``/``pd`` broadcast."""
    lam, omega = _check_lambda_omega(net, lam, omega)
    pd = net.pd_pu if pd is None else np.asarray(pd, dtype=float)
    qd = net.qd_pu if qd is None else np.asarray(qd, dtype=float)
    lead = np.broadcast_shapes(lam.shape[:-1], omega.shape[:-1], pd.shape[:-1], qd.shape[:-1])
    p = np.broadcast_to(-pd, lead + (net.n_nonslack,)).copy()
    q = np.broadcast_to(-qd, lead + (net.n_nonslack,)).copy()
    g = lam * net.g_bar_pu * (1.0 + omega)
    pos = net.dg_positions
    p[..., pos] += g
    q[..., pos] += net.phi * g
    return p, q


def actual_injection(net: RadialNetwork, lam, omega) -> Injection:
    """Bus injections after DG dispatch ``lam`` under uncertainty ``omega``."""
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if lam.ndim != 1 or omega.ndim != 1:
        raise ValueError("lambda and omega must be vectors")
    p, q = injections(net, lam, omega)
    return Injection(p, q)


def nominal_injection(net: RadialNetwork, lam) -> Injection:
    """Injections with the uncertainty set to zero (the surrogate's features)."""
    lam = np.asarray(lam, dtype=float)
    return actual_injection(net, lam, np.zeros_like(lam))


def solve_batch(net: RadialNetwork, p: np.ndarray, q: np.ndarray,
                tol: float = V_TOL, max_iter: int = MAX_ITER) -> BatchSolution:
    """Backward/forward sweep for ``S`` injection profiles at once.

    Each row iterates independently and is frozen once its largest voltage
    update falls below ``tol``.  Rows whose squared voltage turns
    non-positive are flagged as not converged and left as NaN.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    S, n = p.shape
    if n != net.n_nonslack or q.shape != p.shape:
        raise ValueError(f"injections must have {net.n_nonslack} columns")
    D = net.descendant  # (nbr, n)
    Bt = net.subtree_branches.T
    r, x = net.r_pu, net.x_pu
    z2 = r * r + x * x
    v1sq = net.v_slack**2
    send = net.sending_pos
    at_root = send < 0
    send_safe = np.where(at_root, 0, send)
    nbr = net.n_branch

    P = np.full((S, nbr), np.nan)
    Q = np.full((S, nbr), np.nan)
    V2 = np.full((S, n), np.nan)
    I2 = np.full((S, nbr), np.nan)
    iters = np.zeros(S, dtype=int)
    conv = np.zeros(S, dtype=bool)

    # lossless start: flows from injections only
    P0 = -p @ D.T
    Q0 = -q @ D.T
    active = np.arange(S)
    i2 = np.zeros((S, nbr))
    v_prev = np.full((S, n), net.v_slack)
    pa, qa = P0, Q0
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        Pa = pa + (i2 * r) @ Bt
        Qa = qa + (i2 * x) @ Bt
        drop = 2.0 * (r * Pa + x * Qa) - z2 * i2
        v2 = v1sq - drop @ D
        collapsed = np.any(~(v2 > 0), axis=1)
        vs2 = np.where(at_root, v1sq, v2[:, send_safe])
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            i2_new = (Pa * Pa + Qa * Qa) / vs2
            v = np.sqrt(np.where(v2 > 0, v2, np.nan))
            dv = np.max(np.abs(v - v_prev), axis=1)
        bad = collapsed | ~np.all(np.isfinite(i2_new), axis=1)
        done = (dv < tol) & ~bad
        finish = done | bad | (it == max_iter)
        if np.any(finish):
            rows = active[finish]
            keep = finish & ~bad
            kr = active[keep]
            P[kr], Q[kr], V2[kr], I2[kr] = Pa[keep], Qa[keep], v2[keep], i2_new[keep]
            conv[active[done]] = True
            iters[rows] = it
        stay = ~finish
        active = active[stay]
        pa, qa = pa[stay], qa[stay]
        i2, v_prev = i2_new[stay], v[stay]

    V = np.sqrt(V2)
    I = np.sqrt(I2)
    p_loss = np.sum(r * I2, axis=1)
    slack_p = np.sum(P[:, net.root_branches], axis=1)
    res = distflow_residuals(net, p, q, V, I, P, Q)
    return BatchSolution(V, I, P, Q, p_loss, slack_p, conv, iters, res)


def distflow_residuals(net: RadialNetwork, p, q, V, I, P, Q) -> np.ndarray:
    """Largest absolute residual of the four DistFlow equations, per row."""
    p, q, V, I, P, Q = (np.atleast_2d(a) for a in (p, q, V, I, P, Q))
    r, x = net.r_pu, net.x_pu
    recv, send = net.receiving_pos, net.sending_pos
    I2 = I * I
    # children flows of each receiving bus
    child = np.zeros((net.n_branch, net.n_branch))
    for e, s in enumerate(send):
        if s >= 0:
            parent = np.flatnonzero(recv == s)[0]
            child[parent, e] = 1.0
    r1 = P @ child.T - (p[:, recv] + P - r * I2)
    r2 = Q @ child.T - (q[:, recv] + Q - x * I2)
    v2 = V * V
    vs2 = np.where(send < 0, net.v_slack**2, v2[:, np.where(send < 0, 0, send)])
    r3 = v2[:, recv] - (vs2 - 2.0 * (r * P + x * Q) + (r * r + x * x) * I2)
    r4 = I2 - (P * P + Q * Q) / vs2
    stacked = np.abs(np.concatenate([r1, r2, r3, r4], axis=1))
    with np.errstate(invalid="ignore"):
        return np.max(stacked, axis=1)


def solve_power_flow(net: RadialNetwork, inj: Injection) -> PowerFlowSolution:
    """Solve the DistFlow equations for one injection profile."""
    if inj.p.shape != (net.n_nonslack,):
        raise ValueError(f"injection must cover {net.n_nonslack} non-slack buses")
    b = solve_batch(net, inj.p[None], inj.q[None])
    sol = PowerFlowSolution(
        V=b.V[0], I=b.I[0], P=b.P[0], Q=b.Q[0], p_loss=float(b.p_loss[0]),
        converged=bool(b.converged[0]), iterations=int(b.iterations[0]),
        residual=float(b.residual[0]), v_slack=net.v_slack,
        slack_injection=float(b.slack_p[0]),
    )
    return sol


def violation_batch(net: RadialNetwork, V: np.ndarray, I: np.ndarray) -> np.ndarray:
    """Maximum normalized limit violation per row (NaN rows give NaN)."""
    V = np.atleast_2d(V)
    I = np.atleast_2d(I)
    imax = net.i_max_pu
    terms = [
        np.max(net.v_min - V, axis=1),
        np.max(V - net.v_max, axis=1),
        np.max((I - imax) / imax, axis=1),
        np.full(V.shape[0], max(net.v_min - net.v_slack, net.v_slack - net.v_max)),
    ]
    return np.max(np.stack(terms), axis=0)


def max_violation(sol: PowerFlowSolution, net: RadialNetwork) -> float:
    """Largest normalized violation of the voltage and current limits.

    Voltage terms are in p.u. of the 1 p.u. nominal, current terms are
    relative to each branch's own limit.  Non-positive means feasible.
    """
    if not sol.converged:
        raise ValueError("violation is undefined for an unconverged power flow")
    return float(violation_batch(net, sol.V, sol.I)[0])


def energy_purchase(net: RadialNetwork, lam, omega, sol: PowerFlowSolution) -> float:
    """Net power drawn at the substation, checked against the slack flow."""
    if not sol.converged:
        raise ValueError("energy purchase needs a converged power flow")
    lam, omega = _check_lambda_omega(net, lam, omega)
    g = float(np.sum(net.pd_pu) + sol.p_loss - np.sum(lam * net.g_bar_pu * (1.0 + omega)))
    if abs(g - sol.slack_injection) > BALANCE_TOL:
        raise ConsistencyError(
            f"power balance mismatch: {g!r} vs slack injection {sol.slack_injection!r}"
        )
    return g
