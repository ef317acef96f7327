"""Command line interface.

Exit codes: 0 on success, 2 when a solve fails to converge, 1 for
configuration or usage errors.
"""

import argparse
import sys
import time

import numpy as np

from .errors import ConfigError, ContractError, ConvergenceError, DdseqError
from .harness import parse_config, run_experiment, sweep


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; here they are config
    errors and must exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(
        prog="ddseq",
        description="Substructured Poisson sequences with recycled Krylov "
        "solvers and adaptive coarse spaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    run_p = sub.add_parser("run", help="run one configured experiment")
    run_p.add_argument("--config", required=True, help="key=value config file")
    run_p.add_argument("--out", default=None, help="output directory")

    sweep_p = sub.add_parser("sweep", help="run the experiment over one "
                             "varying config key")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument(
        "--vary", required=True, metavar="KEY=V1,V2,...",
        help="dotted config key and comma-separated values",
    )
    sweep_p.add_argument("--out", default=None)

    bench_p = sub.add_parser("bench", help="compare the compiled and pure "
                             "python kernel backends")
    bench_p.add_argument("--size", type=int, default=256,
                         help="grid edge length for the matvec benchmark")
    bench_p.add_argument("--repeats", type=int, default=5)
    return parser


def _print_summary(summary):
    print(f"steps:               {summary.steps}")
    print(f"first step its:      {summary.first_iterations}")
    print(f"iterations:          {summary.its_string}")
    print(f"mean step time:      {summary.mean_step_time_s:.4e} s")
    print(f"mean iteration time: {summary.mean_iteration_time_s:.4e} s")
    print(f"trailing mean its:   {summary.last_window_mean_iterations:g}")
    if summary.ritz_frozen_at_step is not None:
        print(f"ritz frozen at step: {summary.ritz_frozen_at_step}")


def _cmd_run(args):
    cfg = parse_config(args.config)
    result = run_experiment(cfg, args.out)
    _print_summary(result.summary)
    if result.failed:
        print("solver failed to converge", file=sys.stderr)
        return 2
    return 0


def _cmd_sweep(args):
    cfg = parse_config(args.config)
    if "=" not in args.vary:
        raise ConfigError("--vary expects KEY=V1,V2,...")
    key, _, tail = args.vary.partition("=")
    values = [v.strip() for v in tail.split(",") if v.strip()]
    if not values:
        raise ConfigError("--vary needs at least one value")
    results = sweep(cfg, key.strip(), values, args.out)
    failed = False
    for raw, result in results:
        status = "ok" if not result.failed else "FAILED"
        print(f"{key}={raw}: {result.summary.its_string} [{status}]")
        failed = failed or result.failed
    return 2 if failed else 0


def _time_callable(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cmd_bench(args):
    from . import kernels
    from .kernels import pykernels
    from .linalg import SparseMatrix, factorize_spd
    from .meshfem import assemble_laplacian_full, build_grid

    mesh = build_grid(args.size, args.size)
    K = assemble_laplacian_full(mesh)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(K.n_cols)

    backends = [("python", pykernels)]
    if kernels.compiled_available():
        from .kernels import _ckernels
        backends.append(("compiled", _ckernels))
    else:
        print("compiled backend unavailable; timing pure python only")

    print(f"grid {args.size}x{args.size}, operator order {K.n_rows}, "
          f"{K.values.size} stored entries")
    print(f"{'kernel':<16}{'backend':<12}{'best of ' + str(args.repeats):>14}")
    for name, mod in backends:
        t = _time_callable(
            lambda m=mod: m.csr_matvec(
                K.row_offsets, K.col_indices, K.values, x
            ),
            args.repeats,
        )
        print(f"{'csr_matvec':<16}{name:<12}{t:>14.6e}")

    chain = build_grid(2000, 1)
    K1 = assemble_laplacian_full(chain)
    for name, mod in backends:
        def run(m=mod):
            import ddseq.kernels as pick
            saved = pick.band_cholesky
            pick.band_cholesky = m.band_cholesky
            try:
                factorize_spd(K1)
            finally:
                pick.band_cholesky = saved

        t = _time_callable(run, args.repeats)
        print(f"{'band_cholesky':<16}{name:<12}{t:>14.6e}")
    print(f"active backend at import: {kernels.backend_name}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_bench(args)
    except (ConfigError, OSError) as exc:
        print(f"ddseq: config error: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"ddseq: config error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"ddseq: {exc}", file=sys.stderr)
        return 2
    except DdseqError as exc:
        print(f"ddseq: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
