"""Linearized DistFlow: the branch-flow model with loss terms dropped."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import RadialNetwork


@dataclass
class LinDistFlow:
    """Affine maps from non-slack injections to squared voltages and flows.

    ``v2 = v2_0 + v2_p @ p + v2_q @ q`` and ``P = flow_p @ p``,
    ``Q = flow_q @ q`` (sending-end flows, losses ignored).
    """

    v2_0: float
    v2_p: np.ndarray
    v2_q: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray

    def voltage_sq(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.v2_0 + np.asarray(p) @ self.v2_p.T + np.asarray(q) @ self.v2_q.T

    def voltages(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.sqrt(self.voltage_sq(p, q))

    def flows(self, p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(p) @ self.flow_p.T, np.asarray(q) @ self.flow_q.T


def lindistflow(net: RadialNetwork) -> LinDistFlow:
    """Build the LinDistFlow sensitivities of a radial network."""
    D = net.descendant
    r, x = net.r_pu, net.x_pu
    return LinDistFlow(
        v2_0=net.v_slack**2,
        v2_p=2.0 * D.T @ (r[:, None] * D),
        v2_q=2.0 * D.T @ (x[:, None] * D),
        flow_p=-D,
        flow_q=-D.copy(),
    )
