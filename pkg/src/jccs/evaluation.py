"""Monte-Carlo validation of a dispatch against the AC power flow."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import RadialNetwork, injections, solve_batch, violation_batch
from .uncertainty import STREAM_MC, OmegaSpec, sample_omega

Z95 = 1.959963984540054
MAX_NONCONVERGED = 0.05
BALANCE_TOL = 1e-4


class EvaluationError(RuntimeError):
    pass


def wilson_half_width(k: int, n: int, z: float = Z95) -> float:
    """Half-width of the Wilson score interval for ``k`` successes in ``n``."""
    if n <= 0 or not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n and n > 0")
    p = k / n
    return z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))


@dataclass
class EvaluationResult:
    method: str
    epsilon: float
    violation_probability: float
    violation_half_width: float
    expected_G: float  # p.u.
    expected_G_se: float
    avg_lambda: float
    n_samples: int
    n_violations: int = 0
    n_nonconverged: int = 0
    wall_time: float = 0.0
    instance: str = "nominal"
    lam: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if not 0.0 <= self.violation_probability <= 1.0:
            raise ValueError("violation probability outside [0, 1]")
        if self.violation_half_width < 0 or self.expected_G_se < 0:
            raise ValueError("uncertainty estimates must be non-negative")

    def within_risk(self) -> bool:
        return self.violation_probability <= self.epsilon + self.violation_half_width


def count_violations(h: np.ndarray, converged: np.ndarray) -> int:
    """Draws with ``h > 0``; draws that failed to converge also count."""
    h = np.asarray(h, dtype=float)
    ok = np.asarray(converged, dtype=bool)
    return int(np.sum(ok & (h > 0)) + np.sum(~ok))


def monte_carlo(net: RadialNetwork, pd, qd, lam, spec: OmegaSpec, n: int = 10_000, seed: int = 0,
                method: str = "P3", epsilon: float = 0.0, instance: str = "nominal",
                wall_time: float = 0.0) -> EvaluationResult:
    """Fixed dispatch ``lam`` under ``n`` uncertainty draws."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (net.n_dg,) or np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("utilization must be one value in [0, 1] per DG")
    pd, qd = np.asarray(pd, dtype=float), np.asarray(qd, dtype=float)
    omega = sample_omega(spec, n, seed, net.n_dg, stream=STREAM_MC)
    if np.any(omega <= -1):
        raise EvaluationError("uncertainty draw at or below -1 (negative DG output)")
    p, q = injections(net, lam, omega, pd, qd)
    sol = solve_batch(net, p, q)
    ok = sol.converged
    n_bad = int(np.sum(~ok))
    if n_bad > MAX_NONCONVERGED * n:
        raise EvaluationError(f"{n_bad} of {n} power flows failed to converge")
    h = violation_batch(net, sol.V, sol.I)
    k = count_violations(h, ok)
    G = np.sum(pd) + sol.p_loss - np.sum(lam * net.g_bar_pu * (1.0 + omega), axis=1)
    G = G[ok]
    if np.any(np.abs(G - sol.slack_p[ok]) > BALANCE_TOL):
        raise EvaluationError("power balance does not match the slack injection")
    se = float(np.std(G, ddof=1) / math.sqrt(G.size)) if G.size > 1 else 0.0
    return EvaluationResult(
        method=method, epsilon=float(epsilon),
        violation_probability=k / n, violation_half_width=wilson_half_width(k, n),
        expected_G=float(np.mean(G)), expected_G_se=se,
        avg_lambda=float(np.mean(lam)), n_samples=n, n_violations=k, n_nonconverged=n_bad,
        wall_time=float(wall_time), instance=instance, lam=[float(v) for v in lam],
    )


def worst_case(results: list[EvaluationResult]) -> EvaluationResult:
    """Combine one dispatch evaluated on several demand instances: the
    maximum violation probability is reported, purchase and utilization
    are averaged."""
    if not results:
        raise ValueError("no results to combine")
    worst = max(results, key=lambda r: r.violation_probability)
    m = len(results)
    return EvaluationResult(
        method=worst.method, epsilon=worst.epsilon,
        violation_probability=worst.violation_probability,
        violation_half_width=worst.violation_half_width,
        expected_G=sum(r.expected_G for r in results) / m,
        expected_G_se=math.sqrt(sum(r.expected_G_se**2 for r in results)) / m,
        avg_lambda=sum(r.avg_lambda for r in results) / m,
        n_samples=worst.n_samples, n_violations=worst.n_violations,
        n_nonconverged=sum(r.n_nonconverged for r in results),
        wall_time=sum(r.wall_time for r in results),
        instance="+".join(r.instance for r in results), lam=worst.lam,
    )


REPORT_COLUMNS = (
    "method", "epsilon", "instance", "avg_lambda", "violation_probability", "violation_half_width",
    "expected_G_pu", "expected_G_se_pu", "n_samples", "n_violations", "n_nonconverged", "wall_time",
)
PLOT_COLUMNS = ("method", "epsilon", "utilization", "violation", "violation_err",
                "purchase_mw", "purchase_err_mw", "solve_time_s")


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _sorted(results):
    return sorted(results, key=lambda r: (r.method, r.epsilon, r.instance))


def sweep_report(results: list[EvaluationResult], path, s_base_mva: float = 10.0) -> tuple[Path, Path]:
    """Write the report table and its plot-ready companion.

    Rows are ordered by method then risk level. The companion file
    ``<stem>.plot.csv`` holds the four plotted quantities with purchase
    converted to MW.
    """
    if not results:
        raise ValueError("no results to report")
    path = Path(path)
    rows = _sorted(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in (
                r.method, r.epsilon, r.instance, r.avg_lambda, r.violation_probability,
                r.violation_half_width, r.expected_G, r.expected_G_se, r.n_samples,
                r.n_violations, r.n_nonconverged, r.wall_time)])
    plot_path = path.with_name(path.stem + ".plot.csv")
    with open(plot_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in (
                r.method, r.epsilon, r.avg_lambda, r.violation_probability, r.violation_half_width,
                r.expected_G * s_base_mva, r.expected_G_se * s_base_mva, r.wall_time)])
    return path, plot_path


def read_plot_file(path) -> dict[str, dict[str, np.ndarray]]:
    """Plot-ready file as ``{method: {column: array}}`` ordered by risk level."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PLOT_COLUMNS:
            raise ValueError(f"{path}: not a plot-ready report")
        for row in reader:
            cols = out.setdefault(row["method"], {c: [] for c in PLOT_COLUMNS[1:]})
            for c in PLOT_COLUMNS[1:]:
                cols[c].append(float(row[c]))
    return {m: {c: np.array(v) for c, v in cols.items()} for m, cols in out.items()}


def result_dict(r: EvaluationResult) -> dict:
    return asdict(r)
