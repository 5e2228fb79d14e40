"""Mixed-integer encoding of ReLU networks.

Each hidden neuron with pre-activation ``z`` in ``[lo, hi]`` becomes::

    s - r = z,   0 <= s <= M+ mu,   0 <= r <= M- (1 - mu),   mu binary

with ``M+ = max(hi, 0)`` and ``M- = max(-lo, 0)``. Neurons the bounds prove
inactive (``hi <= 0``) or active (``lo >= 0``) keep their binary, fixed at
0 or 1, and drop the rows that the fixing makes redundant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..neural import MlpModel
from .problem import BINARY, MilpProblem

# interval bounds are widened by this relative margin to absorb rounding
BOUND_SLACK = 1e-9


@dataclass
class NeuronBounds:
    hidden: list[tuple[np.ndarray, np.ndarray]]
    output: tuple[np.ndarray, np.ndarray]

    def __post_init__(self) -> None:
        for lo, hi in self.hidden + [self.output]:
            if np.any(lo > hi):
                raise ValueError("lower bound above upper bound")

    @property
    def n_unstable(self) -> int:
        return int(sum(np.sum((lo < 0) & (hi > 0)) for lo, hi in self.hidden))


def _widen(lo, hi):
    pad = BOUND_SLACK * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    return lo - pad, hi + pad


def propagate_bounds(model: MlpModel, lo, hi, affine: tuple[np.ndarray, np.ndarray] | None = None) -> NeuronBounds:
    """Interval bounds on every pre-activation for inputs in a box.

    With ``affine = (A, x0)`` the network input is ``A u + x0`` for ``u``
    in the box ``[lo, hi]``; the first layer is then bounded exactly.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(lo > hi):
        raise ValueError("input box must have matching, ordered bounds")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("input box must be bounded")
    layers = model.folded_layers()
    W0, b0 = layers[0]
    if affine is not None:
        A, x0 = np.asarray(affine[0], dtype=float), np.asarray(affine[1], dtype=float)
        W0, b0 = W0 @ A, W0 @ x0 + b0
    if W0.shape[1] != lo.size:
        raise ValueError("input box dimension does not match the network")
    hidden = []
    a_lo, a_hi = lo, hi
    for k, (W, b) in enumerate([(W0, b0)] + layers[1:]):
        c, r = (a_lo + a_hi) / 2, (a_hi - a_lo) / 2
        z_c, z_r = W @ c + b, np.abs(W) @ r
        z_lo, z_hi = _widen(z_c - z_r, z_c + z_r)
        if k == len(layers) - 1:
            return NeuronBounds(hidden, (z_lo, z_hi))
        hidden.append((z_lo, z_hi))
        a_lo, a_hi = np.maximum(z_lo, 0.0), np.maximum(z_hi, 0.0)
    raise AssertionError("unreachable")


Expr = tuple[dict[int, float], float]


def _affine(W: np.ndarray, b: np.ndarray, inputs: list[Expr]) -> list[Expr]:
    out = []
    for i in range(W.shape[0]):
        coeffs: dict[int, float] = {}
        const = float(b[i])
        for w, (terms, k) in zip(W[i], inputs):
            if w == 0.0:
                continue
            const += w * k
            for j, a in terms.items():
                coeffs[j] = coeffs.get(j, 0.0) + w * a
        out.append((coeffs, const))
    return out


@dataclass
class MlpEncoding:
    binaries: list[int] = field(default_factory=list)
    hidden: list[list[Expr]] = field(default_factory=list)
    outputs: list[Expr] = field(default_factory=list)
    output_vars: list[int] = field(default_factory=list)


def as_expr(item) -> Expr:
    """Variable index or ``(coeffs, constant)`` pair as an affine expression."""
    if isinstance(item, (int, np.integer)):
        return {int(item): 1.0}, 0.0
    coeffs, const = item
    return dict(coeffs), float(const)


def encode_mlp(problem: MilpProblem, model: MlpModel, bounds: NeuronBounds | None, inputs,
               prefix: str = "nn", output_vars: bool = False,
               affine: tuple[np.ndarray, np.ndarray] | None = None) -> MlpEncoding:
    """Add the network's constraints to ``problem``.

    ``inputs`` lists one variable index or affine expression per network
    input (per box coordinate when ``affine`` maps box variables to
    network inputs, matching :func:`propagate_bounds`). Output expressions
    are returned; with ``output_vars`` each output is also bound to a new
    free-standing variable by an equality row.
    """
    if bounds is None:
        raise ValueError("neuron bounds are required for the encoding")
    layers = model.folded_layers()
    if len(bounds.hidden) != len(layers) - 1:
        raise ValueError("bounds do not match the network depth")
    exprs = [as_expr(v) for v in inputs]
    W0, b0 = layers[0]
    if affine is not None:
        A, x0 = np.asarray(affine[0], dtype=float), np.asarray(affine[1], dtype=float)
        W0, b0 = W0 @ A, W0 @ x0 + b0
    if W0.shape[1] != len(exprs):
        raise ValueError(f"network expects {W0.shape[1]} inputs, got {len(exprs)}")
    enc = MlpEncoding()
    cur = exprs
    for li, ((W, b), (lo, hi)) in enumerate(zip([(W0, b0)] + layers[1:-1], bounds.hidden)):
        if len(lo) != W.shape[0]:
            raise ValueError("bounds do not match the layer width")
        z = _affine(W, b, cur)
        nxt: list[Expr] = []
        for j, ((terms, const), l, h) in enumerate(zip(z, lo, hi)):
            tag = f"{prefix}_{li}_{j}"
            if h <= 0:
                enc.binaries.append(problem.add_var(f"mu_{tag}", 0, 0, BINARY))
                nxt.append(({}, 0.0))
                continue
            if l >= 0:
                enc.binaries.append(problem.add_var(f"mu_{tag}", 1, 1, BINARY))
                s = problem.add_var(f"s_{tag}", l, h)
                row = {s: 1.0}
                for v, a in terms.items():
                    row[v] = row.get(v, 0.0) - a
                problem.add_constraint(row, "=", const, f"relu_{tag}")
                nxt.append(({s: 1.0}, 0.0))
                continue
            mu = problem.add_var(f"mu_{tag}", 0, 1, BINARY)
            enc.binaries.append(mu)
            s = problem.add_var(f"s_{tag}", 0.0, h)
            r = problem.add_var(f"r_{tag}", 0.0, -l)
            row = {s: 1.0, r: -1.0}
            for v, a in terms.items():
                row[v] = row.get(v, 0.0) - a
            problem.add_constraint(row, "=", const, f"relu_{tag}")
            problem.add_constraint({s: 1.0, mu: -h}, "<=", 0.0, f"on_{tag}")
            problem.add_constraint({r: 1.0, mu: -l}, "<=", -l, f"off_{tag}")
            nxt.append(({s: 1.0}, 0.0))
        enc.hidden.append(nxt)
        cur = nxt
    W, b = layers[-1] if len(layers) > 1 else (W0, b0)
    enc.outputs = _affine(W, b, cur)
    if output_vars:
        olo, ohi = bounds.output
        for k, (terms, const) in enumerate(enc.outputs):
            y = problem.add_var(f"y_{prefix}_{k}", olo[k], ohi[k])
            row = {y: 1.0}
            for v, a in terms.items():
                row[v] = row.get(v, 0.0) - a
            problem.add_constraint(row, "=", const, f"out_{prefix}_{k}")
            enc.output_vars.append(y)
    return enc
