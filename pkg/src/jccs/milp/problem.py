"""Mixed-integer linear problems and their text export.

Problems are always minimizations. The LP text format follows the common
CPLEX-style layout::

    \\ comment
    Minimize
     obj: 2 x + 3 y + 1.5
    Subject To
     c0: 1 x - 1 y <= 4
    Bounds
     0 <= x <= 1
     y free
    Binaries
     x
    End

Every variable appears in ``Bounds``; lower bounds of ``-inf`` and upper
bounds of ``+inf`` are written as such. Coefficients use ``repr`` so the
export round-trips exactly through :func:`read_lp`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"
SENSES = ("<=", "=", ">=")

FEAS_TOL = 1e-7
INT_TOL = 1e-6
GAP_TOL = 1e-6

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\[\]]*$")


@dataclass
class Variable:
    name: str
    lb: float
    ub: float
    kind: str = CONTINUOUS


@dataclass
class Constraint:
    coeffs: dict[int, float]
    sense: str
    rhs: float
    name: str


def _as_coeffs(coeffs) -> dict[int, float]:
    items = coeffs.items() if isinstance(coeffs, dict) else coeffs
    out: dict[int, float] = {}
    for j, a in items:
        out[int(j)] = out.get(int(j), 0.0) + float(a)
    return out


class MilpProblem:
    """Variables, linear rows and a linear objective to minimize."""

    def __init__(self, name: str = "problem") -> None:
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0
        self._names: dict[str, int] = {}

    # -- building ---------------------------------------------------------
    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf, kind: str = CONTINUOUS) -> int:
        if not _NAME.match(name):
            raise ValueError(f"invalid variable name {name!r}")
        if name in self._names:
            raise ValueError(f"duplicate variable {name!r}")
        lb, ub = float(lb), float(ub)
        if kind not in (CONTINUOUS, BINARY):
            raise ValueError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            if lb not in (0.0, 1.0) or ub not in (0.0, 1.0):
                raise ValueError("binary bounds must be 0 or 1")
        if math.isnan(lb) or math.isnan(ub) or lb > ub or lb == math.inf or ub == -math.inf:
            raise ValueError(f"invalid bounds [{lb}, {ub}] for {name}")
        self._names[name] = len(self.variables)
        self.variables.append(Variable(name, lb, ub, kind))
        return len(self.variables) - 1

    def add_constraint(self, coeffs, sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in SENSES:
            raise ValueError(f"unknown sense {sense!r}")
        c = _as_coeffs(coeffs)
        for j, a in c.items():
            if not 0 <= j < len(self.variables):
                raise ValueError(f"constraint references undeclared variable {j}")
            if not math.isfinite(a):
                raise ValueError("constraint coefficients must be finite")
        if not math.isfinite(rhs):
            raise ValueError("right-hand side must be finite")
        name = name or f"c{len(self.constraints)}"
        if not _NAME.match(name):
            raise ValueError(f"invalid constraint name {name!r}")
        self.constraints.append(Constraint(c, sense, float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, coeffs, constant: float = 0.0) -> None:
        c = _as_coeffs(coeffs)
        for j, a in c.items():
            if not 0 <= j < len(self.variables) or not math.isfinite(a):
                raise ValueError("objective references undeclared variable or non-finite cost")
        self.objective = c
        self.objective_constant = float(constant)

    # -- inspection -------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_rows(self) -> int:
        return len(self.constraints)

    @property
    def binary_indices(self) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.kind == BINARY]

    @property
    def n_binaries(self) -> int:
        return len(self.binary_indices)

    def index(self, name: str) -> int:
        return self._names[name]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([v.lb for v in self.variables], dtype=float),
                np.array([v.ub for v in self.variables], dtype=float))

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, a in self.objective.items():
            c[j] = a
        return c

    def matrix(self) -> np.ndarray:
        A = np.zeros((self.n_rows, self.n_vars))
        for i, row in enumerate(self.constraints):
            for j, a in row.coeffs.items():
                A[i, j] = a
        return A

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.cost_vector() @ x + self.objective_constant)

    def max_violation(self, x) -> float:
        """Largest violation of any row or bound at ``x``."""
        x = np.asarray(x, dtype=float)
        lb, ub = self.bounds()
        worst = float(max(np.max(lb - x, initial=0.0), np.max(x - ub, initial=0.0)))
        for row in self.constraints:
            lhs = sum(a * x[j] for j, a in row.coeffs.items())
            if row.sense == "<=":
                v = lhs - row.rhs
            elif row.sense == ">=":
                v = row.rhs - lhs
            else:
                v = abs(lhs - row.rhs)
            worst = max(worst, v)
        return worst

    def integrality_violation(self, x) -> float:
        idx = self.binary_indices
        if not idx:
            return 0.0
        v = np.asarray(x, dtype=float)[idx]
        return float(np.max(np.abs(v - np.round(v))))

    def copy(self) -> MilpProblem:
        p = MilpProblem(self.name)
        p.variables = [Variable(v.name, v.lb, v.ub, v.kind) for v in self.variables]
        p.constraints = [Constraint(dict(c.coeffs), c.sense, c.rhs, c.name) for c in self.constraints]
        p.objective = dict(self.objective)
        p.objective_constant = self.objective_constant
        p._names = dict(self._names)
        return p

    # -- text format ------------------------------------------------------
    def _expr(self, coeffs: dict[int, float]) -> str:
        terms = []
        for j in sorted(coeffs):
            a = coeffs[j]
            sign = "-" if a < 0 or (a == 0 and math.copysign(1, a) < 0) else "+"
            terms.append(f"{sign} {abs(a)!r} {self.variables[j].name}")
        if not terms:
            return "0"
        s = " ".join(terms)
        return s[2:] if s.startswith("+ ") else "-" + s[1:]

    def to_lp(self) -> str:
        lines = [f"\\ Problem: {self.name}", "Minimize"]
        obj = self._expr(self.objective)
        if self.objective_constant:
            k = self.objective_constant
            obj += f" {'-' if k < 0 else '+'} {abs(k)!r}"
        lines.append(f" obj: {obj}")
        lines.append("Subject To")
        for c in self.constraints:
            lines.append(f" {c.name}: {self._expr(c.coeffs)} {c.sense} {c.rhs!r}")
        lines.append("Bounds")
        for v in self.variables:
            if v.lb == -math.inf and v.ub == math.inf:
                lines.append(f" {v.name} free")
            else:
                lo = "-inf" if v.lb == -math.inf else repr(v.lb)
                hi = "+inf" if v.ub == math.inf else repr(v.ub)
                lines.append(f" {lo} <= {v.name} <= {hi}")
        bins = [v.name for v in self.variables if v.kind == BINARY]
        if bins:
            lines.append("Binaries")
            lines.extend(f" {b}" for b in bins)
        lines.append("End")
        return "\n".join(lines) + "\n"

    def write_lp(self, path: str | Path) -> None:
        Path(path).write_text(self.to_lp())


_TERM = re.compile(r"([+-])\s*(\S+)(?:\s+([A-Za-z_][A-Za-z0-9_.\[\]]*))?")


def _parse_expr(text: str):
    text = text.strip()
    if text == "0":
        return [], 0.0
    if not text.startswith(("+", "-")):
        text = "+ " + text
    terms, const = [], 0.0
    for sign, num, name in _TERM.findall(text):
        a = float(num) * (-1 if sign == "-" else 1)
        if name:
            terms.append((name, a))
        else:
            const += a
    return terms, const


def read_lp(text: str) -> MilpProblem:
    """Parse the format written by :meth:`MilpProblem.to_lp`."""
    section = None
    name = "problem"
    obj_terms, obj_const = [], 0.0
    rows, bounds, bins = [], {}, set()
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("\\"):
            if line.startswith("\\ Problem:"):
                name = line.split(":", 1)[1].strip()
            continue
        if line in ("Minimize", "Subject To", "Bounds", "Binaries", "End"):
            section = line
            continue
        if section == "Minimize":
            obj_terms, obj_const = _parse_expr(line.split(":", 1)[1])
        elif section == "Subject To":
            label, body = line.split(":", 1)
            m = re.match(r"^(.*)\s(<=|>=|=)\s(\S+)$", body.strip())
            if not m:
                raise ValueError(f"cannot parse row {line!r}")
            terms, _ = _parse_expr(m.group(1))
            rows.append((label.strip(), terms, m.group(2), float(m.group(3))))
        elif section == "Bounds":
            parts = line.split()
            if len(parts) == 2 and parts[1] == "free":
                bounds[parts[0]] = (-math.inf, math.inf)
            elif len(parts) == 5 and parts[1] == parts[3] == "<=":
                bounds[parts[2]] = (float(parts[0]), float(parts[4]))
            else:
                raise ValueError(f"cannot parse bound {line!r}")
        elif section == "Binaries":
            bins.add(line)
        else:
            raise ValueError(f"unexpected line {line!r}")
    p = MilpProblem(name)
    for vname, (lo, hi) in bounds.items():
        p.add_var(vname, lo, hi, BINARY if vname in bins else CONTINUOUS)
    p.set_objective([(p.index(n), a) for n, a in obj_terms], obj_const)
    for label, terms, sense, rhs in rows:
        p.add_constraint([(p.index(n), a) for n, a in terms], sense, rhs, label)
    return p


@dataclass
class MilpSolution:
    status: str
    objective: float = math.nan
    x: np.ndarray | None = None
    bound: float = -math.inf
    gap: float = math.inf
    nodes: int = 0
    iterations: int = 0
    wall_time: float = 0.0
    log: list[tuple[int, float, float, float]] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @property
    def has_solution(self) -> bool:
        return self.x is not None
