"""Command line interface: ``tcpredict <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .analysis import AnalysisError, analyze_call, describe, enumerate_variants, first_iteration_levels
from .backends import BackendError, make_backend
from .cachesim import TraceTooLarge, simulate, steady_invocation, trace_algorithm
from .contraction import ContractionError, SizeModel, parse_contraction, parse_sizes
from .generator import KERNELS, emit_code, find_algorithm, generate_algorithms, invocation_count
from .harness import MachineConfig
from .predictor import STAGES, PredictionError, efficiency_report, predict, rank, size_grid, sweep
from .setup import SetupError, build_setup

EXIT_OK, EXIT_USAGE, EXIT_ANALYSIS, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _contraction(text: str):
    if os.path.isfile(text):
        text = Path(text).read_text().strip()
    return parse_contraction(text)


def _sizes(args, c) -> SizeModel:
    if not args.sizes:
        raise UsageError("--sizes is required (e.g. --sizes a=400,b=400,c=400,i=8)")
    s = SizeModel(parse_sizes(args.sizes))
    missing = [i for i in c.indices if i not in s.assignment]
    if missing:
        raise UsageError(f"--sizes lacks {', '.join(missing)}")
    return s


def _algorithms(args, c):
    kernels = args.kernels.split(",") if args.kernels else KERNELS
    for k in kernels:
        if k not in KERNELS:
            raise UsageError(f"unknown kernel {k!r}; choose from {', '.join(KERNELS)}")
    algs = generate_algorithms(c, kernels)
    if getattr(args, "algorithm", None):
        try:
            algs = [find_algorithm(algs, name) for name in args.algorithm]
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
    return algs


def _machine(args) -> MachineConfig:
    return MachineConfig.load(args.machine)


def _write(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args):
    c = _contraction(args.contraction)
    algs = _algorithms(args, c)
    if args.emit:
        _write(args, "\n\n".join(emit_code(a, args.emit) for a in algs) + "\n")
        return
    counts = {k: sum(a.kernel == k for a in algs) for k in KERNELS}
    lines = [f"{c}: {len(algs)} algorithms ("
             + ", ".join(f"{counts[k]} {k}" for k in KERNELS if counts[k]) + ")"]
    lines += [a.name for a in algs]
    _write(args, "\n".join(lines) + "\n")


def cmd_analyze(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    out = []
    for a in _algorithms(args, c):
        out.append(f"{a.name}  ({invocation_count(a, s):,} invocations)")
        for oa in analyze_call(a, s, cold_root=args.cold_root):
            out.append("  " + describe(oa, s))
        for level, starts in first_iteration_levels(a, s, args.threshold):
            out.append(f"  first iteration of level {level}: {starts:,} starts")
        for v in enumerate_variants(a, s, m.cache, args.threshold, prefetch=True,
                                    failures=True, first_iterations=True, cold_root=args.cold_root):
            out.append(f"  variant {v.label}: weight {v.weight:,}")
    _write(args, "\n".join(out) + "\n")


def cmd_setup(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    out = []
    for a in _algorithms(args, c):
        for honor in (False, True):
            ops = analyze_call(a, s, cold_root=args.cold_root, prefetch=honor)
            sl = build_setup(ops, m.cache, s)
            tag = "prefetch" if honor else "distance"
            state = "omitted" if sl.omitted else ("truncated" if sl.truncated else "full")
            out.append(f"{a.name} [{tag}, {state}, limit {sl.limit:,}]: {sl}")
    _write(args, "\n".join(out) + "\n")


def cmd_simulate(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    out = []
    for a in _algorithms(args, c):
        tr = trace_algorithm(a, s, cap=args.cap, runs=args.runs)
        res = simulate(tr, m.cache)
        out.append(f"{a.name}: {len(tr):,} accesses, {res.hit_count:,} hits, {res.misses:,} misses")
        if args.dump:
            path = Path(args.dump.replace("{name}", a.name.replace("'", "p")))
            if args.trace_format == "binary":
                path.write_bytes(tr.to_bytes())
            else:
                path.write_text(tr.to_text())
        try:
            k = steady_invocation(tr)
            out.append(f"  steady invocation at {k.env}")
        except ValueError:
            pass
    _write(args, "\n".join(out) + "\n")


def _backend(args, m):
    return make_backend(args.backend, m)


def cmd_predict(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    backend = _backend(args, m)
    out = []
    for a in _algorithms(args, c):
        p = predict(a, s, m, backend, args.stage, seed=args.seed, cold_root=args.cold_root)
        out.append(f"{p.algorithm}: {p.total_time_ns / 1e6:.3f} ms, {p.flops_per_cycle:.3f} flops/cycle [{p.stage}]")
        for v in p.per_variant:
            out.append(f"  {v.label}: {v.weight:,} x {v.median_ns:,.0f} ns   setup: {v.setup or '-'}")
        out.extend(f"  warning: {w}" for w in p.warnings)
    _write(args, "\n".join(out) + "\n")


def cmd_rank(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    r = rank(c, s, m, _backend(args, m), args.stage, _algorithms(args, c),
             seed=args.seed, cold_root=args.cold_root)
    out = [f"{n:>3}  {p.algorithm:<14} {p.total_time_ns / 1e6:>12.3f} ms  {p.flops_per_cycle:>7.3f} flops/cycle"
           for n, p in enumerate(r.predictions, start=1)]
    out.append(f"prediction wall time: {r.wall_ns / 1e9:.3f} s")
    _write(args, "\n".join(out) + "\n")


def cmd_sweep(args):
    c = _contraction(args.contraction)
    m = _machine(args)
    grid = size_grid(args.grid) if args.grid else ([parse_sizes(args.sizes)] if args.sizes else [])
    text, errors = sweep(c, grid, m, _backend(args, m), args.stage, _algorithms(args, c),
                         seed=args.seed, cold_root=args.cold_root)
    _write(args, text)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)


def cmd_efficiency(args):
    c = _contraction(args.contraction)
    s = _sizes(args, c)
    m = _machine(args)
    if not args.execute:
        raise UsageError("efficiency runs every algorithm in full; add --execute to confirm")
    rows = efficiency_report(c, s, m, _backend(args, m), execute=True, budget_s=args.budget,
                             stage=args.stage, algorithms=_algorithms(args, c), seed=args.seed)
    out = ["algorithm,kernel,execution_ns,benchmark_ns,ratio,lower_bound,extrapolated_ratio"]
    for r in rows:
        out.append(f"{r.algorithm},{r.kernel},{r.execution_ns},{r.benchmark_ns},{r.ratio:.6g},"
                   f"{int(r.ratio_is_lower_bound)},{r.extrapolated_ratio:.6g}")
    _write(args, "\n".join(out) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tcpredict", description="Predict the performance of BLAS-based tensor contraction algorithms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, sizes=True, backend=False):
        sp.add_argument("--contraction", "-c", required=True, help="statement such as 'C[a,b,c] = A[a,i] * B[i,b,c]', or a file holding one")
        sp.add_argument("--kernels", help="comma-separated subset of " + ",".join(KERNELS))
        sp.add_argument("--algorithm", "-a", action="append", help="restrict to this algorithm (repeatable)")
        sp.add_argument("--out", "-o", help="write output to this file")
        if sizes:
            sp.add_argument("--sizes", "-s", help="index sizes, e.g. a=400,b=400,c=400,i=8")
            sp.add_argument("--machine", "-m", help="machine config file (key=value lines)")
            sp.add_argument("--cold-root", action="store_true", help="treat operands not reused within one execution as cold")
        if backend:
            sp.add_argument("--backend", choices=("native", "reference", "synthetic"), default="synthetic")
            sp.add_argument("--stage", choices=STAGES, default="first-iter")
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("generate", help="list or emit the algorithms")
    common(sp, sizes=False)
    sp.add_argument("--emit", choices=("pseudo", "c", "ast-json"))
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("analyze", help="access distances, prefetching and variants")
    common(sp)
    sp.add_argument("--threshold", type=float, default=0.01)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("setup", help="setup lists for the steady-state kernel")
    common(sp)
    sp.set_defaults(func=cmd_setup)

    sp = sub.add_parser("simulate", help="trace small instances through an LRU cache")
    common(sp)
    sp.add_argument("--cap", type=int, default=10**7, help="maximum trace length")
    sp.add_argument("--runs", type=int, default=1, help="back-to-back executions to trace")
    sp.add_argument("--dump", help="trace file; {name} is replaced by the algorithm name")
    sp.add_argument("--trace-format", choices=("text", "binary"), default="text")
    sp.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("predict", cmd_predict, "predict algorithm run times"),
                                 ("rank", cmd_rank, "rank all algorithms by predicted time")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, backend=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("sweep", help="CSV of predictions over a size grid")
    common(sp, backend=True)
    sp.add_argument("--grid", help="e.g. 'a=b=c:8..1024*2;i=8'")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("efficiency", help="execution time over prediction time")
    common(sp, backend=True)
    sp.add_argument("--execute", action="store_true", help="actually run every algorithm")
    sp.add_argument("--budget", type=float, default=900.0, help="seconds per algorithm before aborting")
    sp.set_defaults(func=cmd_efficiency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tcpredict: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractionError, AnalysisError, SetupError, TraceTooLarge, ValueError) as exc:
        print(f"tcpredict: analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (BackendError, PredictionError, MemoryError) as exc:
        print(f"tcpredict: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
