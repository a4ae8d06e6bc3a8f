"""Command-line interface: fit a model to a CSV, or run the simulation
experiments (accuracy and timing) from plain-text configs.

Exit codes: 0 success, 1 numerical failure during estimation, 2 usage
errors (bad flags, missing or malformed files).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import _kernels
from .em import fit_em
from .model import EstimationError, FitConfig
from .modelio import (
    DEFAULT_MISSING_TOKENS,
    load_csv,
    parse_config,
    read_model,
    write_model,
)
from .quasi_newton import fit_quasi_newton
from .rotation import promax, varimax
from .simulate import (
    accuracy_plan_from_config,
    run_accuracy_experiment,
    run_timing_experiment,
    timing_plan_from_config,
)

ALGORITHMS = ("modified-em", "ordinary-em", "quasi-newton")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fimlfa",
        description="Maximum likelihood factor analysis for incomplete data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a factor model to a CSV dataset")
    fit.add_argument("--input", required=True, help="CSV file with a header row")
    fit.add_argument("--factors", required=True, type=int, help="number of factors")
    fit.add_argument("--algorithm", choices=ALGORITHMS, default="modified-em")
    fit.add_argument("--tol", type=float, default=1e-8,
                     help="relative log-likelihood convergence tolerance")
    fit.add_argument("--max-iter", type=int, default=10000)
    fit.add_argument("--starts", type=int, default=1,
                     help="number of random starting values")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--restrict", action="store_true",
                     help="impose the echelon identification restriction")
    fit.add_argument("--rotation", choices=("none", "varimax", "promax"),
                     default="none", help="rotation applied to the report")
    fit.add_argument("--promax-power", type=float, default=4.0)
    fit.add_argument("--init", default=None,
                     help="model file providing the starting values")
    fit.add_argument("--missing-token", action="append", default=None,
                     help="token marking a missing cell (repeatable; "
                          "default: empty string and NA)")
    fit.add_argument("--output", default=None, help="write the fitted model here")
    fit.add_argument("--threads", type=int, default=None)

    sim = sub.add_parser("simulate", help="run a replicated accuracy experiment")
    sim.add_argument("--config", required=True, help="key = value experiment config")
    sim.add_argument("--output", default=None, help="write per-cell results CSV here")
    sim.add_argument("--plot-data", default=None,
                     help="write a minimal CSV of (n, q, mechanism, common, metric) rows")
    sim.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config entry (repeatable)")
    sim.add_argument("--threads", type=int, default=None)

    bench = sub.add_parser("benchmark", help="time the algorithms across a missingness grid")
    bench.add_argument("--config", required=True, help="key = value experiment config")
    bench.add_argument("--output", default=None, help="write timing CSV here")
    bench.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
    bench.add_argument("--threads", type=int, default=None)
    return parser


def _apply_overrides(cfg: dict, pairs) -> dict:
    out = dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _print_loadings(loadings, columns, out, title):
    m = loadings.shape[1]
    name_w = max(8, max(len(str(c)) for c in columns))
    print(title, file=out)
    header = " ".join(f"f{j + 1:d}".rjust(9) for j in range(m))
    print(f"{'variable'.ljust(name_w)} {header}", file=out)
    for name, row in zip(columns, loadings):
        cells = " ".join(f"{v:9.4f}" for v in row)
        print(f"{str(name).ljust(name_w)} {cells}", file=out)


def cmd_fit(args, out=None) -> int:
    out = sys.stdout if out is None else out
    tokens = DEFAULT_MISSING_TOKENS if args.missing_token is None else tuple(args.missing_token)
    loaded = load_csv(args.input, missing_tokens=tokens)
    dataset, columns = loaded.dataset, loaded.columns
    init = None
    if args.init is not None:
        init = read_model(args.init).model
    config = FitConfig(
        max_iter=args.max_iter,
        tol=args.tol,
        n_starts=args.starts,
        seed=args.seed,
        algorithm=args.algorithm,
        restrict=args.restrict,
    )
    if args.algorithm == "quasi-newton":
        result = fit_quasi_newton(dataset, args.factors, config, init=init)
    else:
        variant = "modified" if args.algorithm == "modified-em" else "ordinary"
        result = fit_em(dataset, args.factors, config, variant=variant, init=init)

    obs_frac = dataset.mask.mean()
    print(f"backend: {_kernels.BACKEND}", file=out)
    print(f"n: {dataset.n_cases}   p: {dataset.n_vars}   "
          f"observed cells: {100.0 * obs_frac:.1f}%", file=out)
    print(f"algorithm: {result.algorithm}   "
          f"restricted: {'yes' if args.restrict else 'no'}", file=out)
    print(f"log-likelihood: {result.loglik:.10f}", file=out)
    print(f"iterations: {result.iterations}   "
          f"converged: {'yes' if result.converged else 'no'}", file=out)
    print(f"wall time: {result.wall_time:.3f} s", file=out)
    if not result.converged:
        print(f"warning: not converged within {args.max_iter} iterations",
              file=sys.stderr)

    if args.rotation != "none":
        if args.factors < 2:
            print("rotation skipped: needs at least two factors", file=out)
        elif args.rotation == "varimax":
            rot = varimax(result.model.loadings)
            _print_loadings(rot.loadings, columns, out, "varimax loadings")
        else:
            rot = promax(result.model.loadings, power=args.promax_power)
            _print_loadings(rot.loadings, columns, out, "promax pattern loadings")
            print("factor correlations", file=out)
            for row in rot.factor_correlations:
                print(" ".join(f"{v:9.4f}" for v in row), file=out)

    if args.output is not None:
        write_model(
            args.output,
            result.model,
            restricted=args.restrict,
            algorithm=result.algorithm,
            loglik=result.loglik,
            iterations=result.iterations,
        )
        print(f"model written to {args.output}", file=out)
    return 0


def cmd_simulate(args, out=None) -> int:
    out = sys.stdout if out is None else out
    cfg = _apply_overrides(parse_config(args.config), args.set)
    mode = cfg.get("mode", "accuracy")
    if mode != "accuracy":
        raise ValueError(
            f"simulate runs accuracy configs; got mode={mode!r} "
            "(use the benchmark command for timing)"
        )
    cells, kwargs = accuracy_plan_from_config(cfg)
    results = run_accuracy_experiment(cells, **kwargs)
    for res in results:
        d = res.cell.design
        common = "yes" if res.cell.use_common else "no"
        print(
            f"n={d.n_cases} q={d.q} mechanism={d.mechanism} common={common}: "
            f"sqrtMSE={res.metrics.sqrt_mse:.5f} sqrtBIAS={res.metrics.sqrt_bias:.5f} "
            f"(S={res.metrics.n_replications}, failures={res.n_failures}, "
            f"r={res.metrics.r})",
            file=out,
        )
    header = "n,q,mechanism,common,replications,failures,r,sqrt_mse,sqrt_bias"
    if args.output is not None:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for res in results:
                d = res.cell.design
                fh.write(
                    f"{d.n_cases},{d.q},{d.mechanism},"
                    f"{int(res.cell.use_common)},{res.metrics.n_replications},"
                    f"{res.n_failures},{res.metrics.r},"
                    f"{res.metrics.sqrt_mse!r},{res.metrics.sqrt_bias!r}\n"
                )
        print(f"results written to {args.output}", file=out)
    if args.plot_data is not None:
        with open(args.plot_data, "w", encoding="utf-8") as fh:
            fh.write("n,q,mechanism,common,sqrt_mse,sqrt_bias\n")
            for res in results:
                d = res.cell.design
                fh.write(
                    f"{d.n_cases},{d.q},{d.mechanism},{int(res.cell.use_common)},"
                    f"{res.metrics.sqrt_mse!r},{res.metrics.sqrt_bias!r}\n"
                )
        print(f"plot data written to {args.plot_data}", file=out)
    return 0


def cmd_benchmark(args, out=None) -> int:
    out = sys.stdout if out is None else out
    cfg = _apply_overrides(parse_config(args.config), args.set)
    mode = cfg.get("mode", "timing")
    if mode != "timing":
        raise ValueError(
            f"benchmark runs timing configs; got mode={mode!r} "
            "(use the simulate command for accuracy)"
        )
    kwargs = timing_plan_from_config(cfg)
    rows = run_timing_experiment(**kwargs)
    if rows:
        baseline = rows[0].mean_time * rows[0].speedup_vs_baseline
        print(f"baseline: quasi-newton on complete data, "
              f"{baseline:.3f} seconds per fit", file=out)
    for row in rows:
        print(
            f"q={row.q}: {row.algorithm} {row.mean_time:.3f} seconds "
            f"({row.mean_iterations:.1f} iterations, "
            f"speedup {row.speedup_vs_baseline:.1f})",
            file=out,
        )
    display = {
        "modified-em": "modified EM algorithm",
        "ordinary-em": "ordinary EM algorithm",
        "quasi-newton": "quasi-Newton method",
    }
    if rows:
        qmax = max(row.q for row in rows)
        print(f"comparison at q={qmax}:", file=out)
        for row in rows:
            if row.q == qmax:
                print(f"  {display[row.algorithm]}: {row.mean_time:.2f} seconds",
                      file=out)
    if args.output is not None:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write("q,algorithm,mean_time_seconds,mean_iterations,"
                     "speedup_vs_baseline,runs\n")
            for row in rows:
                fh.write(
                    f"{row.q},{row.algorithm},{row.mean_time!r},"
                    f"{row.mean_iterations!r},{row.speedup_vs_baseline!r},"
                    f"{row.runs}\n"
                )
        print(f"timing written to {args.output}", file=out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None:
        _kernels.set_threads(args.threads)
    handler = {"fit": cmd_fit, "simulate": cmd_simulate, "benchmark": cmd_benchmark}
    try:
        return handler[args.command](args)
    except (EstimationError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
