"""DG uncertainty models and historical dataset generation.

Random streams come from numpy's counter-based Philox generator.  Work is
cut into fixed blocks of ``BLOCK`` indices and block ``b`` of stream ``s``
uses the key ``(seed, s << 40 | b)``, so any split of the index range
(serial or parallel) reproduces the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import RadialNetwork, injections, solve_batch, violation_batch

BLOCK = 4096
MAX_DISCARD = 0.2

# stream ids keep independent uses of one seed apart
STREAM_OMEGA = 1
STREAM_DEMAND = 2
STREAM_LAMBDA = 3
STREAM_AUGMENT = 4
STREAM_MC = 5
STREAM_SCENARIO = 6


class GenerationError(RuntimeError):
    pass


def substream(seed: int, stream: int, block: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, (int(stream) << 40) | int(block)]
    return np.random.Generator(np.random.Philox(key=key))


def blocked_draw(seed: int, stream: int, n: int, draw, start: int = 0) -> np.ndarray:
    """Concatenate ``draw(rng, count)`` over the blocks covering ``[start, start+n)``."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    out = []
    first, last = start // BLOCK, (start + n - 1) // BLOCK
    for b in range(first, last + 1):
        chunk = draw(substream(seed, stream, b), BLOCK)
        lo = max(start - b * BLOCK, 0)
        hi = min(start + n - b * BLOCK, BLOCK)
        out.append(chunk[lo:hi])
    return np.concatenate(out)


@dataclass(frozen=True)
class OmegaSpec:
    """Distribution of the per-DG uncertainty level ``omega``.

    ``kind`` is one of ``gaussian`` (params: mean, std), ``beta`` (a, b),
    ``weibull`` (scale, shape) or ``degenerate`` (value).  Beta and Weibull
    draws are centred by ``center`` and scaled by ``kappa``:
    ``omega = kappa * (draw - center)``.
    """

    kind: str
    params: tuple[float, ...]
    kappa: float = 1.0
    center: float = 0.0

    def __post_init__(self) -> None:
        kinds = {"gaussian": 2, "beta": 2, "weibull": 2, "degenerate": 1}
        if self.kind not in kinds:
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")
        if len(self.params) != kinds[self.kind]:
            raise ValueError(f"{self.kind} takes {kinds[self.kind]} parameters")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.kind == "gaussian" and self.params[1] < 0:
            raise ValueError("standard deviation must be non-negative")
        if self.kind in ("beta", "weibull") and min(self.params) <= 0:
            raise ValueError(f"{self.kind} parameters must be positive")

    @classmethod
    def gaussian(cls, std: float = 0.1, mean: float = 0.0) -> OmegaSpec:
        return cls("gaussian", (mean, std))

    @classmethod
    def beta(cls, a: float = 2.0, b: float = 6.0, target_std: float = 0.1) -> OmegaSpec:
        mean = a / (a + b)
        std = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
        return cls("beta", (a, b), kappa=target_std / std, center=mean)

    @classmethod
    def weibull(cls, scale: float = 1.0, shape: float = 5.0, target_std: float = 0.1) -> OmegaSpec:
        g1 = math.gamma(1 + 1 / shape)
        g2 = math.gamma(1 + 2 / shape)
        mean = scale * g1
        std = scale * math.sqrt(g2 - g1 * g1)
        return cls("weibull", (scale, shape), kappa=target_std / std, center=mean)

    @classmethod
    def degenerate(cls, value: float = 0.0) -> OmegaSpec:
        return cls("degenerate", (value,))

    @classmethod
    def case(cls, number: int) -> OmegaSpec:
        """Uncertainty of the three 33-bus case studies."""
        return {1: cls.gaussian, 2: cls.beta, 3: cls.weibull}[number]()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "kappa": self.kappa,
                "center": self.center}

    @classmethod
    def from_dict(cls, d: dict) -> OmegaSpec:
        kind = d["kind"]
        params = tuple(float(v) for v in d["params"])
        if kind not in ("gaussian", "degenerate", "beta", "weibull"):
            raise ValueError(f"unknown uncertainty kind {kind!r}")
        if "kappa" in d or kind in ("gaussian", "degenerate"):
            return cls(kind, params, float(d.get("kappa", 1.0)), float(d.get("center", 0.0)))
        # centring and scaling derived from the base distribution
        return getattr(cls, kind)(*params, target_std=float(d.get("target_std", 0.1)))

    def _draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(self.params[0], self.params[1], size=size)
        if self.kind == "degenerate":
            return np.full(size, self.params[0])
        if self.kind == "beta":
            base = rng.beta(self.params[0], self.params[1], size=size)
        else:
            base = self.params[0] * rng.weibull(self.params[1], size=size)
        return self.kappa * (base - self.center)


def sample_omega(spec: OmegaSpec, n: int, seed: int, n_dg: int = 2,
                 stream: int = STREAM_OMEGA, start: int = 0) -> np.ndarray:
    """``n`` i.i.d. uncertainty vectors, shape ``(n, n_dg)``."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    return blocked_draw(seed, stream, n, lambda rng, k: spec._draw(rng, (k, n_dg)), start)


@dataclass(frozen=True)
class SamplingBox:
    """Uniform box for nominal operating points: per-bus demand scaling and DG utilization."""

    demand_lo: float = 0.6
    demand_hi: float = 1.4
    lambda_lo: float = 0.0
    lambda_hi: float = 1.0

    def __post_init__(self) -> None:
        if not (0 <= self.demand_lo <= self.demand_hi):
            raise ValueError("demand scaling range must satisfy 0 <= lo <= hi")
        if not (0 <= self.lambda_lo <= self.lambda_hi <= 1):
            raise ValueError("utilization range must lie within [0, 1]")


@dataclass
class Dataset:
    """Observations ``(x, lambda, omega, h, p_loss)`` stored column-wise.

    ``x`` holds the nominal non-slack injections ``[p, q]``; ``lam`` is kept
    so the actual injection can be rebuilt from ``x`` and ``omega``.
    ``p_loss`` is ``None`` for augmented data, which only carries ``h``.
    """

    x: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    h: np.ndarray
    p_loss: np.ndarray | None = None
    provenance: str = "historical"
    bus_ids: list[int] = field(default_factory=list)
    dg_buses: list[int] = field(default_factory=list)
    discarded: int = 0

    def __post_init__(self) -> None:
        n = len(self.h)
        for name in ("x", "lam", "omega"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"{name} must have one row per record")
            setattr(self, name, arr)
        self.h = np.asarray(self.h, dtype=float)
        if not np.all(np.isfinite(self.h)):
            raise ValueError("h must be finite")
        if self.p_loss is not None:
            self.p_loss = np.asarray(self.p_loss, dtype=float)
            if self.p_loss.shape != (n,) or not np.all(np.isfinite(self.p_loss)):
                raise ValueError("p_loss must be finite with one entry per record")
            if np.any(self.p_loss < 0):
                raise ValueError("p_loss must be non-negative")

    def __len__(self) -> int:
        return len(self.h)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def columns(self) -> list[str]:
        half = self.x.shape[1] // 2
        ids = self.bus_ids or list(range(half))
        dgs = self.dg_buses or list(range(self.lam.shape[1]))
        cols = [f"p_{b}" for b in ids] + [f"q_{b}" for b in ids]
        cols += [f"lam_{b}" for b in dgs] + [f"omega_{b}" for b in dgs] + ["h"]
        if self.p_loss is not None:
            cols.append("p_loss")
        return cols

    def matrix(self) -> np.ndarray:
        parts = [self.x, self.lam, self.omega, self.h[:, None]]
        if self.p_loss is not None:
            parts.append(self.p_loss[:, None])
        return np.hstack(parts)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(f"# provenance={self.provenance} discarded={self.discarded}\n")
            fh.write(",".join(self.columns()) + "\n")
            np.savetxt(fh, self.matrix(), fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        path = Path(path)
        with path.open() as fh:
            meta_line = fh.readline()
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        meta = dict(kv.split("=") for kv in meta_line.lstrip("# ").split())
        if data.shape[1] != len(header):
            raise ValueError(f"{path}: row width does not match the header")
        n_p = sum(c.startswith("p_") and c != "p_loss" for c in header)
        n_dg = sum(c.startswith("lam_") for c in header)
        has_loss = header[-1] == "p_loss"
        x = data[:, : 2 * n_p]
        lam = data[:, 2 * n_p : 2 * n_p + n_dg]
        omega = data[:, 2 * n_p + n_dg : 2 * n_p + 2 * n_dg]
        h = data[:, 2 * n_p + 2 * n_dg]
        return cls(
            x=x, lam=lam, omega=omega, h=h,
            p_loss=data[:, -1] if has_loss else None,
            provenance=meta.get("provenance", "historical"),
            bus_ids=[int(c[2:]) for c in header[:n_p]],
            dg_buses=[int(c[4:]) for c in header[2 * n_p : 2 * n_p + n_dg]],
            discarded=int(meta.get("discarded", 0)),
        )


def nominal_features(net: RadialNetwork, lam: np.ndarray, pd=None, qd=None) -> np.ndarray:
    """Feature vectors ``x = [p, q]`` at zero uncertainty (rows broadcast)."""
    p, q = injections(net, lam, np.zeros_like(np.asarray(lam, dtype=float)), pd, qd)
    return np.concatenate([p, q], axis=-1)


def actual_from_features(net: RadialNetwork, x: np.ndarray, lam: np.ndarray,
                         omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild actual injections from stored features and uncertainty."""
    n = net.n_nonslack
    p, q = x[..., :n].copy(), x[..., n:].copy()
    g = lam * net.g_bar_pu * omega
    p[..., net.dg_positions] += g
    q[..., net.dg_positions] += net.phi * g
    return p, q


def evaluate_records(net: RadialNetwork, x, lam, omega):
    """Run the power flow for stored records; returns ``(h, p_loss, converged)``."""
    p, q = actual_from_features(net, np.atleast_2d(x), np.atleast_2d(lam), np.atleast_2d(omega))
    sol = solve_batch(net, p, q)
    return violation_batch(net, sol.V, sol.I), sol.p_loss, sol.converged


def generate_historical(net: RadialNetwork, spec: OmegaSpec, n: int,
                        box: SamplingBox | None = None, seed: int = 0) -> Dataset:
    """Draw operating points and uncertainty, solve the power flow, keep converged rows.

    Rejected draws are replaced by continuing the stream; more than 20 %
    rejections raises :class:`GenerationError`.
    """
    if n <= 0:
        raise ValueError("sample count must be positive")
    box = box or SamplingBox()
    n_ns, n_dg = net.n_nonslack, net.n_dg
    xs, lams, oms, hs, losses = [], [], [], [], []
    kept = drawn = 0
    while kept < n:
        want = n - kept
        # over-draw a little so a few rejections rarely need another round
        batch = want + max(16, want // 20)
        scale = blocked_draw(seed, STREAM_DEMAND, batch,
                             lambda r, k: r.uniform(box.demand_lo, box.demand_hi, (k, n_ns)), drawn)
        lam = blocked_draw(seed, STREAM_LAMBDA, batch,
                           lambda r, k: r.uniform(box.lambda_lo, box.lambda_hi, (k, n_dg)), drawn)
        om = sample_omega(spec, batch, seed, n_dg, start=drawn)
        pd, qd = net.pd_pu * scale, net.qd_pu * scale
        x = nominal_features(net, lam, pd, qd)
        h, loss, ok = evaluate_records(net, x, lam, om)
        # keep draws in stream order until the target is met
        idx = np.flatnonzero(ok)[:want]
        last = idx[-1] + 1 if len(idx) == want else batch
        drawn += int(last)
        xs.append(x[idx]); lams.append(lam[idx]); oms.append(om[idx])
        hs.append(h[idx]); losses.append(loss[idx])
        kept += len(idx)
        if drawn - kept > MAX_DISCARD * drawn and drawn >= 100:
            raise GenerationError(
                f"{drawn - kept} of {drawn} draws did not converge; the sampling box "
                "produces mostly infeasible physics"
            )
    return Dataset(
        x=np.concatenate(xs), lam=np.concatenate(lams), omega=np.concatenate(oms),
        h=np.concatenate(hs), p_loss=np.concatenate(losses), provenance="historical",
        bus_ids=net.nonslack_ids(), dg_buses=[d.bus for d in net.dgs],
        discarded=drawn - kept,
    )
