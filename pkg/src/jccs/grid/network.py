"""Radial network data model and the ``.net`` text format.

A ``.net`` file is a sequence of ``[section]`` blocks (``base``, ``buses``,
``branches``, ``limits``, ``dg``) whose rows are whitespace separated.
``#`` starts a comment.  Physical units in the file are kW/kVAr for demand,
ohm for impedance, kA for current limits and MW for DG capacity; everything
is converted to per unit on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class NetworkError(ValueError):
    """Structural or parse error in a network description."""


@dataclass(frozen=True)
class DG:
    bus: int
    g_bar: float  # MW
    phi: float = 0.0


@dataclass
class RadialNetwork:
    """Radial feeder with per-unit conversions precomputed.

    Bus ids are arbitrary integers; internally buses are ordered as given and
    the slack bus is excluded from injection vectors.  ``branches`` are
    ``(from, to, r_ohm, x_ohm)`` with ``from`` the parent side.
    """

    bus_ids: list[int]
    p_demand: np.ndarray  # MW, aligned with bus_ids
    q_demand: np.ndarray  # MVAr
    branches: list[tuple[int, int, float, float]]
    slack_bus: int
    s_base: float = 10.0  # MVA
    v_base: float = 12.66  # kV
    slack_kv: float = 12.66
    v_min: float = 0.9
    v_max: float = 1.1
    i_max_ka: np.ndarray | float = 0.249
    dgs: list[DG] = field(default_factory=list)
    name: str = "network"

    def __post_init__(self) -> None:
        self.p_demand = np.asarray(self.p_demand, dtype=float)
        self.q_demand = np.asarray(self.q_demand, dtype=float)
        n_br = len(self.branches)
        self.i_max_ka = np.broadcast_to(np.asarray(self.i_max_ka, dtype=float), (n_br,)).copy()
        self._validate()
        self._build_topology()

    # -- validation -----------------------------------------------------
    def _validate(self) -> None:
        ids = self.bus_ids
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if self.slack_bus not in ids:
            raise NetworkError(f"slack bus {self.slack_bus} is not a bus")
        if len(self.p_demand) != len(ids) or len(self.q_demand) != len(ids):
            raise NetworkError("demand vectors do not match bus count")
        if len(self.branches) != len(ids) - 1:
            raise NetworkError(
                f"a radial network needs {len(ids) - 1} branches, got {len(self.branches)}"
            )
        index = {b: k for k, b in enumerate(ids)}
        parent = list(range(len(ids)))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f, t, r, x in self.branches:
            if f not in index or t not in index:
                raise NetworkError(f"branch ({f}, {t}) references an unknown bus")
            if not r > 0 or not x >= 0:
                raise NetworkError(f"branch ({f}, {t}) needs r > 0 and x >= 0")
            a, b = find(index[f]), find(index[t])
            if a == b:
                raise NetworkError(f"branch ({f}, {t}) closes a loop")
            parent[a] = b
        if not self.v_min < self.v_max:
            raise NetworkError("v_min must be below v_max")
        if np.any(self.i_max_ka <= 0):
            raise NetworkError("current limits must be positive")
        if self.s_base <= 0 or self.v_base <= 0 or self.slack_kv <= 0:
            raise NetworkError("bases and slack voltage must be positive")
        seen = set()
        for dg in self.dgs:
            if dg.bus not in index or dg.bus == self.slack_bus:
                raise NetworkError(f"DG at bus {dg.bus} must sit on a non-slack bus")
            if dg.g_bar < 0:
                raise NetworkError(f"DG at bus {dg.bus} has negative capacity")
            if dg.bus in seen:
                raise NetworkError(f"two DG units at bus {dg.bus}")
            seen.add(dg.bus)

    def _build_topology(self) -> None:
        index = {b: k for k, b in enumerate(self.bus_ids)}
        adj: dict[int, list[tuple[int, int]]] = {k: [] for k in range(len(self.bus_ids))}
        for e, (f, t, _, _) in enumerate(self.branches):
            adj[index[f]].append((index[t], e))
            adj[index[t]].append((index[f], e))
        root = index[self.slack_bus]
        # BFS from the slack bus orients every branch parent -> child
        order = [root]
        parent_branch = {root: -1}
        sending = np.zeros(len(self.branches), dtype=int)
        receiving = np.zeros(len(self.branches), dtype=int)
        for u in order:
            for v, e in adj[u]:
                if v in parent_branch:
                    continue
                parent_branch[v] = e
                sending[e], receiving[e] = u, v
                order.append(v)
        if len(order) != len(self.bus_ids):
            raise NetworkError("network is not connected")

        self.nonslack = [k for k in range(len(self.bus_ids)) if k != root]
        pos = {k: i for i, k in enumerate(self.nonslack)}
        n_br, n_ns = len(self.branches), len(self.nonslack)
        # descendant[e, j]: non-slack bus j lies downstream of branch e (inclusive)
        desc = np.zeros((n_br, n_ns))
        below = np.zeros((n_br, n_br))
        for j in self.nonslack:
            k = j
            while k != root:
                e = parent_branch[k]
                desc[e, pos[j]] = 1.0
                below[e, parent_branch[j]] = 1.0
                k = sending[e]
        self.descendant = desc
        self.subtree_branches = below
        self._root = root
        self._send_pos = np.array([pos.get(s, -1) for s in sending])
        self._recv_pos = np.array([pos[r] for r in receiving])
        self.root_branches = np.flatnonzero(sending == root)
        self._index = index
        self._pos = pos

    # -- per-unit quantities ---------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_nonslack(self) -> int:
        return len(self.nonslack)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_dg(self) -> int:
        return len(self.dgs)

    @property
    def z_base(self) -> float:
        return self.v_base**2 / self.s_base

    @property
    def i_base_ka(self) -> float:
        return self.s_base / (math.sqrt(3.0) * self.v_base)

    @property
    def r_pu(self) -> np.ndarray:
        return np.array([b[2] for b in self.branches]) / self.z_base

    @property
    def x_pu(self) -> np.ndarray:
        return np.array([b[3] for b in self.branches]) / self.z_base

    @property
    def i_max_pu(self) -> np.ndarray:
        return self.i_max_ka / self.i_base_ka

    @property
    def v_slack(self) -> float:
        return self.slack_kv / self.v_base

    @property
    def pd_pu(self) -> np.ndarray:
        """Active demand of non-slack buses, p.u."""
        return self.p_demand[self.nonslack] / self.s_base

    @property
    def qd_pu(self) -> np.ndarray:
        return self.q_demand[self.nonslack] / self.s_base

    @property
    def dg_positions(self) -> np.ndarray:
        """Positions of DG buses within the non-slack injection vector."""
        return np.array([self._pos[self._index[d.bus]] for d in self.dgs], dtype=int)

    @property
    def g_bar_pu(self) -> np.ndarray:
        return np.array([d.g_bar for d in self.dgs]) / self.s_base

    @property
    def phi(self) -> np.ndarray:
        return np.array([d.phi for d in self.dgs])

    @property
    def sending_pos(self) -> np.ndarray:
        """Non-slack position of each branch's sending bus (-1 for the slack)."""
        return self._send_pos

    @property
    def receiving_pos(self) -> np.ndarray:
        return self._recv_pos

    def nonslack_ids(self) -> list[int]:
        return [self.bus_ids[k] for k in self.nonslack]

    def with_demand(self, p_demand: np.ndarray, q_demand: np.ndarray) -> RadialNetwork:
        """Copy of the network with a different demand profile (MW, MVAr)."""
        return RadialNetwork(
            bus_ids=list(self.bus_ids),
            p_demand=np.asarray(p_demand, dtype=float),
            q_demand=np.asarray(q_demand, dtype=float),
            branches=list(self.branches),
            slack_bus=self.slack_bus,
            s_base=self.s_base,
            v_base=self.v_base,
            slack_kv=self.slack_kv,
            v_min=self.v_min,
            v_max=self.v_max,
            i_max_ka=self.i_max_ka.copy(),
            dgs=list(self.dgs),
            name=self.name,
        )

    def scaled(self, factor: float) -> RadialNetwork:
        return self.with_demand(self.p_demand * factor, self.q_demand * factor)


# -- .net format --------------------------------------------------------------

_SECTIONS = ("base", "buses", "branches", "limits", "dg")


def parse_network(text: str, name: str = "network") -> RadialNetwork:
    """Parse ``.net`` text; errors carry the offending line number."""
    sections: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise NetworkError(f"line {lineno}: malformed section header {line!r}")
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise NetworkError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise NetworkError(f"line {lineno}: data before any section header")
        sections[current].append((lineno, line.split()))

    def num(tok: str, lineno: int) -> float:
        try:
            val = float(tok)
        except ValueError:
            raise NetworkError(f"line {lineno}: expected a number, got {tok!r}") from None
        if not math.isfinite(val):
            raise NetworkError(f"line {lineno}: non-finite value {tok!r}")
        return val

    def keyvals(sec: str) -> dict[str, tuple[float, int]]:
        out = {}
        for lineno, toks in sections[sec]:
            if len(toks) != 2:
                raise NetworkError(f"line {lineno}: expected 'key value' in [{sec}]")
            out[toks[0].lower()] = (num(toks[1], lineno), lineno)
        return out

    base = keyvals("base")
    limits = keyvals("limits")
    for key, sec in (("s_mva", base), ("v_kv", base)):
        if key not in sec:
            raise NetworkError(f"[base] is missing {key}")
    for key in ("v_min_pu", "v_max_pu", "i_max_ka"):
        if key not in limits:
            raise NetworkError(f"[limits] is missing {key}")

    bus_ids, pd, qd, slack = [], [], [], None
    for lineno, toks in sections["buses"]:
        if len(toks) not in (3, 4):
            raise NetworkError(f"line {lineno}: bus rows are 'id p_kw q_kvar [slack]'")
        bid = int(num(toks[0], lineno))
        if bid in bus_ids:
            raise NetworkError(f"line {lineno}: duplicate bus {bid}")
        bus_ids.append(bid)
        pd.append(num(toks[1], lineno) / 1000.0)
        qd.append(num(toks[2], lineno) / 1000.0)
        if len(toks) == 4:
            if toks[3].lower() != "slack":
                raise NetworkError(f"line {lineno}: unknown bus flag {toks[3]!r}")
            if slack is not None:
                raise NetworkError(f"line {lineno}: second slack bus")
            slack = bid
    if slack is None:
        raise NetworkError("no bus is flagged as slack")

    known = set(bus_ids)
    default_imax = limits["i_max_ka"][0]
    branches, imax = [], []
    for lineno, toks in sections["branches"]:
        if len(toks) not in (4, 5):
            raise NetworkError(f"line {lineno}: branch rows are 'from to r_ohm x_ohm [i_max_ka]'")
        f, t = int(num(toks[0], lineno)), int(num(toks[1], lineno))
        if f not in known or t not in known:
            raise NetworkError(f"line {lineno}: branch ({f}, {t}) references an unknown bus")
        r, x = num(toks[2], lineno), num(toks[3], lineno)
        if not r > 0 or x < 0:
            raise NetworkError(f"line {lineno}: branch ({f}, {t}) needs r > 0 and x >= 0")
        branches.append((f, t, r, x))
        imax.append(num(toks[4], lineno) if len(toks) == 5 else default_imax)

    dgs = []
    for lineno, toks in sections["dg"]:
        if len(toks) not in (2, 3):
            raise NetworkError(f"line {lineno}: dg rows are 'bus g_bar_mw [phi]'")
        bus = int(num(toks[0], lineno))
        if bus not in known or bus == slack:
            raise NetworkError(f"line {lineno}: DG bus {bus} must be a non-slack bus")
        g = num(toks[1], lineno)
        if g < 0:
            raise NetworkError(f"line {lineno}: negative DG capacity")
        dgs.append(DG(bus, g, num(toks[2], lineno) if len(toks) == 3 else 0.0))

    v_kv = base["v_kv"][0]
    return RadialNetwork(
        bus_ids=bus_ids,
        p_demand=np.array(pd),
        q_demand=np.array(qd),
        branches=branches,
        slack_bus=slack,
        s_base=base["s_mva"][0],
        v_base=v_kv,
        slack_kv=limits.get("slack_kv", (v_kv, 0))[0],
        v_min=limits["v_min_pu"][0],
        v_max=limits["v_max_pu"][0],
        i_max_ka=np.array(imax),
        dgs=dgs,
        name=name,
    )


def load_network(path: str | Path) -> RadialNetwork:
    path = Path(path)
    return parse_network(path.read_text(), name=path.stem)


def builtin_network(name: str = "ieee33") -> RadialNetwork:
    text = resources.files("jccs.grid").joinpath(f"data/{name}.net").read_text()
    return parse_network(text, name=name)
