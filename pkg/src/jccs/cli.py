"""``jccs`` command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 infeasible, 4 solver limit.
``JCCS_OUT_DIR`` overrides the output directory and ``JCCS_THREADS`` caps
the BLAS thread pools (set before numpy loads).
"""

from __future__ import annotations

import os
import sys

if os.environ.get("JCCS_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["JCCS_THREADS"]

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 1, 2, 3, 4
COMMANDS = ("generate", "train", "solve", "benchmark", "evaluate", "plot")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jccs", description="Learning-based chance-constrained dispatch pipeline.")
    p.add_argument("--version", action="version", version=f"jccs {__version__}")
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="YAML pipeline configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")
    p.add_argument("--report", help="plot: report file to render (default: the config's report)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    from .config import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    out = args.out or os.environ.get("JCCS_OUT_DIR")
    if out:
        changes["output_dir"] = str(Path(out).resolve())
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _print_rows(results) -> None:
    for r in results:
        lam = "-" if r.lam is None else " ".join(f"{v:.6f}" for v in r.lam)
        print(f"{r.method:7s} eps={r.epsilon:<5g} status={r.status:11s} lambda=[{lam}] "
              f"G={r.expected_G:.6g} p.u. time={r.wall_time:.2f}s")


def _print_eval(results) -> None:
    for r in results:
        print(f"{r.method:7s} eps={r.epsilon:<5g} violation={r.violation_probability:.4f}"
              f"±{r.violation_half_width:.4f} G={r.expected_G:.6g}±{r.expected_G_se:.2g} p.u.")


def run(args) -> int:
    from . import pipeline as pl
    from .config import ConfigError
    from .evaluation import EvaluationError
    from .uncertainty import GenerationError

    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"jccs: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        print("jccs: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    if args.command != "plot" and not args.config:
        print("jccs: error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "generate":
            info = pl.cmd_generate(cfg)
            print(f"records={info['records']} discarded={info['discarded']} "
                  f"violating={info['violating_fraction']:.4f} -> {info['path']}")
        elif args.command == "train":
            info = pl.cmd_train(cfg)
            print(f"rho={info['rho']:.6g} simulator_holdout_rmse={info['holdout_rmse']:.4g} "
                  f"-> {info['metrics']}")
        elif args.command == "solve":
            try:
                _print_rows(pl.cmd_solve(cfg))
            finally:
                print(f"results -> {pl.Paths.of(cfg).results}")
        elif args.command == "benchmark":
            try:
                bench, (evals, report, plot_file) = pl.cmd_benchmark(cfg)
                _print_rows(bench)
                _print_eval(evals)
                print(f"report -> {report}")
            finally:
                print(f"results -> {pl.Paths.of(cfg).results}")
        elif args.command == "evaluate":
            evals, report, plot_file = pl.cmd_evaluate(cfg)
            _print_eval(evals)
            print(f"report -> {report}")
        elif args.command == "plot":
            from .plotting import render_report

            report = Path(args.report) if args.report else pl.Paths.of(cfg).report
            plot_file = report if report.name.endswith(".plot.csv") else \
                report.with_name(report.stem + ".plot.csv")
            if not plot_file.exists():
                raise pl.DataError(f"plot-ready report not found at {plot_file}")
            print(f"figure -> {render_report(plot_file)}")
    except pl.InfeasibleError as exc:
        print(f"jccs: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except pl.SolverLimitError as exc:
        print(f"jccs: solver limit: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except (pl.DataError, GenerationError, EvaluationError, ConfigError, OSError) as exc:
        print(f"jccs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
