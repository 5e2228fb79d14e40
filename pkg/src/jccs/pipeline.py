"""End-to-end stages: data, models, dispatch, benchmarks and evaluation.

Every stage reads and writes files under the configured output directory.
Artifacts carry a digest of the settings they depend on in their names,
so models trained for one configuration are never mixed with another's.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import CalibrationResult, GbtModel, augment, calibrate, train_simulator
from .config import PipelineConfig
from .evaluation import EvaluationResult, monte_carlo, sweep_report, worst_case
from .milp import MilpOptions
from .neural import MlpModel, train_dataset
from .opt import (
    CaseSetup,
    DispatchResult,
    P3Options,
    demand_instance,
    draw_scenarios,
    solve_b1_saa,
    solve_b1_scenario,
    solve_p3,
    solve_risk_neutral,
)
from .uncertainty import Dataset, evaluate_records, generate_historical

log = logging.getLogger("jccs")

VERIFY_ROWS = 32
VERIFY_TOL = 1e-6


class DataError(RuntimeError):
    """Missing, corrupt or inconsistent input files."""


class InfeasibleError(RuntimeError):
    pass


class SolverLimitError(RuntimeError):
    pass


@dataclass
class Paths:
    root: Path
    data: str
    models: str

    @classmethod
    def of(cls, cfg: PipelineConfig) -> Paths:
        root = Path(cfg.output_dir)
        if not root.is_absolute():
            root = Path(cfg.base_dir) / root
        return cls(root.resolve(), cfg.stage_hash("data"), cfg.stage_hash("models"))

    def _p(self, name: str) -> Path:
        return self.root / name

    @property
    def historical(self) -> Path:
        return self._p(f"historical-{self.data}.csv")

    def model(self, kind: str) -> Path:
        return self._p(f"{kind}-{self.models}.json")

    @property
    def results(self) -> Path:
        return self._p(f"results-{self.models}.csv")

    @property
    def report(self) -> Path:
        return self._p(f"report-{self.models}.csv")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found at {path}; run the earlier pipeline stage first")
    return path


# -- data -----------------------------------------------------------------------

def verify_dataset(net, ds: Dataset, n_rows: int = VERIFY_ROWS) -> float:
    """Re-run the power flow on evenly spaced rows; returns the largest
    deviation in ``h`` and raises when it exceeds the tolerance."""
    if ds.x.shape[1] != 2 * net.n_nonslack or ds.lam.shape[1] != net.n_dg:
        raise DataError("dataset columns do not match the network")
    idx = np.unique(np.linspace(0, len(ds) - 1, min(n_rows, len(ds))).astype(int))
    h, loss, ok = evaluate_records(net, ds.x[idx], ds.lam[idx], ds.omega[idx])
    if not ok.all():
        raise DataError("stored records no longer solve with this network")
    err = float(np.max(np.abs(h - ds.h[idx])))
    if ds.p_loss is not None:
        err = max(err, float(np.max(np.abs(loss - ds.p_loss[idx]))))
    if err > VERIFY_TOL:
        raise DataError(f"stored records disagree with the power flow by {err:.3g}")
    return err


def load_historical(cfg: PipelineConfig, net=None) -> Dataset:
    path = _require(Paths.of(cfg).historical, "historical dataset")
    try:
        ds = Dataset.load(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None
    verify_dataset(net or cfg.load_network(), ds)
    return ds


def cmd_generate(cfg: PipelineConfig) -> dict:
    net = cfg.load_network()
    paths = Paths.of(cfg)
    ds = generate_historical(net, cfg.omega_spec(), cfg.n_historical, cfg.sampling_box(), cfg.seed)
    ds.save(paths.historical)
    return {"records": len(ds), "discarded": ds.discarded, "path": str(paths.historical),
            "violating_fraction": float(np.mean(ds.h > 0))}


# -- models ----------------------------------------------------------------------

def cmd_train(cfg: PipelineConfig) -> dict:
    """Simulator and calibration on the historical set; quantile network on
    the augmented set; loss network on the historical set."""
    net = cfg.load_network()
    paths = Paths.of(cfg)
    hist = load_historical(cfg, net)
    t0 = time.perf_counter()
    sim, report = train_simulator(hist, cfg.gbt)
    cal = calibrate(sim, hist)
    aug = augment(sim, hist, cfg.K, cfg.N_omega, cfg.seed)
    log.info("simulator trained (held-out RMSE %.4g), rho=%.4g, %d augmented records",
             report.holdout_rmse, cal.rho, len(aug))
    qm = train_dataset(aug, cfg.quantile_mlp.hidden, "quantile", cfg.quantile_mlp.train, cfg.epsilons)
    lm = train_dataset(hist, cfg.loss_mlp.hidden, "loss", cfg.loss_mlp.train)
    sim.save(paths.model("simulator"))
    cal.save(paths.model("calibration"))
    qm.save(paths.model("quantile"))
    lm.save(paths.model("loss"))
    metrics = {
        "simulator": {"holdout_rmse": report.holdout_rmse, "baseline_rmse": report.baseline_rmse,
                      "n_train": report.n_train, "n_holdout": report.n_holdout},
        "rho": cal.rho,
        "augmented_records": len(aug),
        "quantile_mlp": {"training_set": aug.provenance, **qm.history},
        "loss_mlp": {"training_set": hist.provenance, **lm.history},
        "wall_time": time.perf_counter() - t0,
    }
    paths.model("metrics").write_text(json.dumps(metrics, indent=1))
    return {"rho": cal.rho, "holdout_rmse": report.holdout_rmse, "metrics": str(paths.model("metrics"))}


@dataclass
class Artifacts:
    quantile: MlpModel
    loss: MlpModel
    calibration: CalibrationResult
    simulator: GbtModel | None = None


def load_artifacts(cfg: PipelineConfig) -> Artifacts:
    paths = Paths.of(cfg)
    try:
        return Artifacts(
            MlpModel.load(_require(paths.model("quantile"), "quantile network")),
            MlpModel.load(_require(paths.model("loss"), "loss network")),
            CalibrationResult.load(_require(paths.model("calibration"), "calibration file")),
        )
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from None


# -- dispatch results ------------------------------------------------------------

RESULT_FIXED = ("method", "epsilon", "demand_scale")
RESULT_TAIL = ("expected_G", "status", "gap", "wall_time", "nodes", "binaries")


def result_columns(n_dg: int) -> list[str]:
    return list(RESULT_FIXED) + [f"lambda_{k + 1}" for k in range(n_dg)] + list(RESULT_TAIL)


def append_results(path: Path, rows: list[tuple[float, DispatchResult]], n_dg: int) -> None:
    cols = result_columns(n_dg)
    new = not path.exists()
    if not new:
        with path.open() as fh:
            if next(csv.reader(fh), None) != cols:
                raise DataError(f"{path}: existing results have different columns")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(cols)
        for scale, r in rows:
            lam = list(r.lam) if r.lam is not None else [math.nan] * n_dg
            w.writerow([r.method, repr(r.epsilon), repr(scale)] + [repr(float(v)) for v in lam]
                       + [repr(float(r.expected_G)), r.status, repr(float(r.gap)),
                          repr(float(r.wall_time)), r.nodes, r.n_binaries])


def read_results(path: Path) -> list[dict]:
    """Latest row per (method, risk level, demand scale)."""
    _require(path, "dispatch results")
    latest: dict[tuple, dict] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], float(row["epsilon"]), float(row["demand_scale"]))
            latest[key] = row
    return [latest[k] for k in sorted(latest)]


def _check_statuses(results: list[DispatchResult]) -> None:
    bad = [r for r in results if r.status == "infeasible"]
    if bad:
        raise InfeasibleError("; ".join(f"{r.method} eps={r.epsilon}: {r.message}" for r in bad))
    lim = [r for r in results if r.status in ("node_limit", "gap_limit")]
    if lim:
        raise SolverLimitError("; ".join(f"{r.method} eps={r.epsilon}: {r.status}" for r in lim))


def p3_options(cfg: PipelineConfig) -> P3Options:
    s = cfg.solver
    return P3Options(MilpOptions(s.gap, s.node_limit, s.time_limit), s.leaf_unstable,
                     time_limit=s.time_limit)


def _feature_box(cfg: PipelineConfig):
    path = Paths.of(cfg).historical
    if not path.exists():
        return None
    x = Dataset.load(path).x
    return x.min(axis=0), x.max(axis=0)


def cmd_solve(cfg: PipelineConfig) -> list[DispatchResult]:
    net = cfg.load_network()
    art = load_artifacts(cfg)
    box = _feature_box(cfg)
    out: list[tuple[float, DispatchResult]] = []
    for scale in cfg.demand_scales:
        pd, qd = demand_instance(net, scale)
        for eps in cfg.epsilons:
            setup = CaseSetup(net, pd, qd, eps, art.calibration.rho, art.quantile, art.loss, box)
            res = solve_p3(setup, p3_options(cfg))
            log.info("P3 scale=%g eps=%g status=%s lambda=%s", scale, eps, res.status, res.lam)
            out.append((scale, res))
    append_results(Paths.of(cfg).results, out, net.n_dg)
    results = [r for _, r in out]
    _check_statuses(results)
    return results


def run_benchmarks(cfg: PipelineConfig) -> list[DispatchResult]:
    net = cfg.load_network()
    spec = cfg.omega_spec()
    b = cfg.benchmarks
    out: list[tuple[float, DispatchResult]] = []
    saa_opts = MilpOptions(cfg.solver.gap, cfg.solver.node_limit, cfg.solver.time_limit)
    for scale in cfg.demand_scales:
        pd, qd = demand_instance(net, scale)
        b3 = solve_risk_neutral(net, pd, qd) if b.b3 else None
        for eps in cfg.epsilons:
            if b.b1:
                out.append((scale, solve_b1_scenario(net, pd, qd, eps, spec, b.beta, cfg.seed)))
            if b.b1_saa:
                om = draw_scenarios(spec, b.saa_scenarios, cfg.seed, net.n_dg)
                out.append((scale, solve_b1_saa(net, pd, qd, eps, om, saa_opts)))
            if b3 is not None:
                # the risk-neutral dispatch ignores the risk level; it is listed at each one
                out.append((scale, DispatchResult("B3", eps, b3.lam, b3.expected_G, b3.status, b3.gap,
                                                  b3.wall_time, b3.nodes, b3.n_binaries, b3.message)))
    append_results(Paths.of(cfg).results, out, net.n_dg)
    return [r for _, r in out]


def cmd_evaluate(cfg: PipelineConfig) -> tuple[list[EvaluationResult], Path, Path]:
    """Monte-Carlo evaluation of every stored dispatch; the violation
    probability reported for a (method, risk level) pair is the largest
    over the configured demand scales."""
    from .plotting import render_report

    net = cfg.load_network()
    spec = cfg.omega_spec()
    paths = Paths.of(cfg)
    rows = read_results(paths.results)
    groups: dict[tuple[str, float], list[EvaluationResult]] = {}
    skipped = 0
    for row in rows:
        lam = np.array([float(row[f"lambda_{k + 1}"]) for k in range(net.n_dg)])
        if not np.all(np.isfinite(lam)):
            skipped += 1
            continue
        scale = float(row["demand_scale"])
        pd, qd = demand_instance(net, scale)
        ev = monte_carlo(net, pd, qd, lam, spec, cfg.mc_samples, cfg.seed, row["method"],
                         float(row["epsilon"]), f"scale={scale:g}", float(row["wall_time"]))
        groups.setdefault((row["method"], float(row["epsilon"])), []).append(ev)
    if not groups:
        raise DataError("no dispatch with a solution to evaluate")
    if skipped:
        log.warning("%d dispatches without a solution were not evaluated", skipped)
    results = [worst_case(v) for _, v in sorted(groups.items())]
    report, plot_file = sweep_report(results, paths.report, net.s_base)
    render_report(plot_file, title=f"{net.name}, {spec.kind} uncertainty")
    return results, report, plot_file


def cmd_benchmark(cfg: PipelineConfig):
    bench = run_benchmarks(cfg)
    evaluated = cmd_evaluate(cfg)
    _check_statuses(bench)
    return bench, evaluated
