"""Batch entry point: benchmark runs, invariant checks, convergence studies."""

import argparse
import os
import sys

# Linear algebra threads come from HDGFSI_WORKERS; must be pinned before
# numpy loads its BLAS, hence before any solver import.
_w = os.environ.get("HDGFSI_WORKERS")
if _w:
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_k, _w)

from . import bench  # noqa: E402
from .manufactured import convergence_study  # noqa: E402


def _cmd_run(args) -> int:
    try:
        cfg = bench.load_config(args.config)
    except (OSError, bench.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if cfg.scenario in ("manufactured-fluid", "manufactured-solid"):
        return _orders(cfg.scenario, cfg.k)

    def report(st, rep, obs):
        print(f"t={obs.t:9.4f}  newton={obs.newton_iters:2d}  "
              f"minJ={obs.min_jac:7.4f}  A=({obs.ax:+.5f},{obs.ay:+.5f})  "
              f"drag={obs.drag:10.4f}  lift={obs.lift:10.4f}", flush=True)

    path = bench.run_benchmark(cfg, observer=report if args.verbose else None)
    print(f"wrote {path}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import format_results, run_all
    results = run_all()
    print(format_results(results))
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return 1 if bad else 0


def _orders(which: str, k: int) -> int:
    errs, orders = convergence_study(which, k=k)
    kind = which.replace("manufactured-", "")
    field = "velocity" if kind == "fluid" else "displacement"
    print(f"manufactured {kind} solution, degree {k}, {field} errors:")
    ns = [4 * 2 ** i for i in range(len(errs))]
    for i, (n, e) in enumerate(zip(ns, errs)):
        tail = f"   order {orders[i - 1]:.3f}" if i else ""
        print(f"  n={n:3d}  err={e:.4e}{tail}")
    need = k + 0.7
    ok = min(orders) >= need
    print(f"observed orders {['%.3f' % o for o in orders]} "
          f"{'meet' if ok else 'MISS'} the {need:.1f} target")
    return 0 if ok else 1


def _cmd_convergence(args) -> int:
    which = args.scenario
    if not which.startswith("manufactured-"):
        which = "manufactured-" + which
    if which not in ("manufactured-fluid", "manufactured-solid"):
        print(f"error: unknown scenario {args.scenario!r}", file=sys.stderr)
        return 2
    return _orders(which, args.k)


def cli_main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="hdgfsi",
        description="HDG fluid-structure benchmark driver")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario from a config file")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("-v", "--verbose", action="store_true",
                       help="print per-step observables")
    p_run.set_defaults(func=_cmd_run)

    p_ver = sub.add_parser("verify", help="run the invariant check suite")
    p_ver.set_defaults(func=_cmd_verify)

    p_con = sub.add_parser("convergence",
                           help="manufactured-solution order study")
    p_con.add_argument("scenario",
                       help="manufactured-fluid or manufactured-solid")
    p_con.add_argument("-k", type=int, default=2,
                       help="polynomial degree (default 2)")
    p_con.set_defaults(func=_cmd_convergence)

    args = ap.parse_args(argv)
    return args.func(args)


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
