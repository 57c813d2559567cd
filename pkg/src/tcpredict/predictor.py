"""Weighted micro-benchmark predictions, ranking, sweeps and efficiency."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .analysis import BenchmarkVariant, copy_variants, enumerate_variants
from .backends import (
    ExecutionAborted,
    KernelBackend,
    Workspace,
    algorithm_tensors,
    execute_algorithm,
)
from .contraction import Contraction, SizeModel
from .generator import Algorithm, call_counts, generate_algorithms, invocation_count, walk_calls
from .harness import MachineConfig, TimingResult, flops_of, run_micro_benchmark
from .setup import SetupList, build_setup

log = logging.getLogger(__name__)

STAGES = ("repeated", "distance", "prefetch", "failure", "first-iter")

# which analysis mechanisms each stage turns on
_STAGE_FLAGS = {
    "distance": dict(prefetch=False, failures=False, first_iterations=False),
    "prefetch": dict(prefetch=True, failures=False, first_iterations=False),
    "failure": dict(prefetch=True, failures=True, first_iterations=False),
    "first-iter": dict(prefetch=True, failures=True, first_iterations=True),
}


class PredictionError(RuntimeError):
    pass


@dataclass
class VariantTiming:
    label: str
    weight: int
    median_ns: float
    setup: str = ""


@dataclass
class Prediction:
    algorithm: str
    kernel: str
    stage: str
    total_time_ns: float
    flops_per_cycle: float
    per_variant: list[VariantTiming]
    invocations: int
    benchmark_wall_ns: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def total_time_s(self) -> float:
        return self.total_time_ns / 1e9


def _warm_setup() -> SetupList:
    # repeated execution only: each repetition leaves the operands cached
    return SetupList((), omitted=True)


def stage_variants(a: Algorithm, s: SizeModel, m: MachineConfig, stage: str,
                   threshold: float = 0.01, cold_root: bool = False) -> list[tuple[BenchmarkVariant, SetupList]]:
    """(variant, setup list) pairs for the main kernel and the copies."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    if stage == "repeated":
        out = [(BenchmarkVariant("repeated", (), invocation_count(a, s), a.main_call), _warm_setup())]
        for n, (call, loops) in enumerate((c, l) for c, l in walk_calls(a.tree) if c.kind == "copy"):
            count = 1
            for i in loops:
                count *= s[i]
            out.append((BenchmarkVariant(f"copy{n}:repeated", (), count, call), _warm_setup()))
        return out
    flags = _STAGE_FLAGS[stage]
    variants = enumerate_variants(a, s, m.cache, threshold, cold_root=cold_root, **flags)
    variants += copy_variants(a, s, prefetch=flags["prefetch"], cold_root=cold_root)
    return [(v, build_setup(v.per_operand, m.cache, s)) for v in variants]


def _bench_key(v: BenchmarkVariant, sl: SetupList, s: SizeModel):
    return (v.call, str(sl), sl.omitted, tuple(sorted(v.env.items())), tuple(sorted(s.assignment.items())))


def predict(a: Algorithm, s: SizeModel, m: MachineConfig, backend: KernelBackend,
            stage: str = "first-iter", *, seed: int = 0, threshold: float = 0.01,
            cold_root: bool = False, memo: dict | None = None) -> Prediction:
    """Σ weight × median over the stage's benchmark variants."""
    pairs = stage_variants(a, s, m, stage, threshold, cold_root)
    total_calls = invocation_count(a, s)
    main_weight = sum(v.weight for v, _ in pairs if v.call == a.main_call)
    if main_weight != total_calls:
        raise PredictionError(f"{a.name}: variant weights {main_weight} != invocations {total_calls}")
    timings, warnings = [], []
    total = Fraction(0)
    wall = 0
    for v, sl in pairs:
        key = _bench_key(v, sl, s)
        res: TimingResult | None = memo.get(key) if memo is not None else None
        if res is None:
            res = run_micro_benchmark(v, sl, backend, m, s, seed=seed)
            wall += res.wall_ns
            if memo is not None:
                memo[key] = res
        warnings.extend(res.warnings)
        timings.append(VariantTiming(v.label, v.weight, res.median_ns, str(sl)))
        total += v.weight * Fraction(res.median_ns)
    total_ns = float(total)
    fpc = flops_of(a.contraction, s) / (total_ns * 1e-9 * m.clock_hz) if total_ns > 0 else float("inf")
    if fpc > m.peak_flops_per_cycle * (1 + 1e-9):
        msg = (f"{a.name}: predicted {fpc:.3g} flops/cycle exceeds the configured peak "
               f"{m.peak_flops_per_cycle:g}; check clock_hz/flops_per_cycle/threads")
        if backend.models_time:
            raise PredictionError(msg)
        warnings.append(msg)
    return Prediction(a.name, a.kernel, stage, total_ns, fpc, timings, total_calls, wall, sorted(set(warnings)))


@dataclass
class Ranking:
    predictions: list[Prediction]
    wall_ns: int


def rank(c: Contraction, s: SizeModel, m: MachineConfig, backend: KernelBackend,
         stage: str = "first-iter", algorithms: Sequence[Algorithm] | None = None, **kwargs) -> Ranking:
    """Predictions ordered by total time, ties by name."""
    t0 = time.perf_counter_ns()
    algorithms = algorithms if algorithms is not None else generate_algorithms(c)
    memo: dict = kwargs.pop("memo", {})
    preds = [predict(a, s, m, backend, stage, memo=memo, **kwargs) for a in algorithms]
    preds.sort(key=lambda p: (p.total_time_ns, p.algorithm))
    return Ranking(preds, time.perf_counter_ns() - t0)


def size_grid(spec: str) -> list[dict[str, int]]:
    """``a=b=c:8..32*2;i=8`` style grids.

    Items are separated by ``;``.  Each item names one or more tied indices
    and either a value list ``1,2,3``, a range ``lo..hi`` (step 1), a
    geometric range ``lo..hi*k`` or an arithmetic range ``lo..hi+k``.
    """
    axes = []
    for item in filter(None, (x.strip() for x in spec.split(";"))):
        names, sep, values = item.partition(":") if ":" in item else item.rpartition("=")
        if not sep:
            raise ValueError(f"grid item {item!r} needs names and values")
        tied = [n.strip() for n in names.split("=") if n.strip()]
        axes.append((tied, _grid_values(values.strip())))
    points: list[dict[str, int]] = [{}]
    for tied, values in axes:
        points = [dict(p, **{n: v for n in tied}) for p in points for v in values]
    return points if axes else []


def _grid_values(text: str) -> list[int]:
    if ".." not in text:
        return [int(x) for x in text.split(",") if x.strip()]
    lo, hi = text.split("..", 1)
    lo = int(lo)
    if "*" in hi:
        hi, k = hi.split("*")
        out, v = [], lo
        while v <= int(hi):
            out.append(v)
            v *= int(k)
        return out
    step = 1
    if "+" in hi:
        hi, step = hi.split("+")
    return list(range(lo, int(hi) + 1, int(step)))


def sweep(c: Contraction, grid: Iterable[Mapping[str, int]], m: MachineConfig, backend: KernelBackend,
          stage: str = "first-iter", algorithms: Sequence[Algorithm] | None = None,
          **kwargs) -> tuple[str, list[str]]:
    """CSV text with one row per (algorithm, size point), plus error messages."""
    algorithms = algorithms if algorithms is not None else generate_algorithms(c)
    indices = list(c.indices)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "kernel", *indices, "time_ns", "flops_per_cycle", "stage"])
    errors = []
    memo: dict = {}
    for point in grid:
        s = SizeModel(point)
        for a in algorithms:
            try:
                p = predict(a, s, m, backend, stage, memo=memo, **kwargs)
                w.writerow([a.name, a.kernel, *(s[i] for i in indices),
                            repr(p.total_time_ns), repr(p.flops_per_cycle), stage])
            except Exception as exc:  # keep sweeping; the error is reported
                msg = f"{a.name} at {dict(point)}: {exc}"
                log.warning(msg)
                errors.append(msg)
                w.writerow([a.name, a.kernel, *(point.get(i, "") for i in indices), "", "", stage])
    return buf.getvalue(), errors


@dataclass
class EfficiencyRow:
    algorithm: str
    kernel: str
    execution_ns: int
    benchmark_ns: int
    ratio: float
    aborted: bool
    calls_done: int
    calls_total: int

    @property
    def ratio_is_lower_bound(self) -> bool:
        return self.aborted

    @property
    def extrapolated_ratio(self) -> float:
        if not self.calls_done:
            return float("inf")
        return self.ratio * self.calls_total / self.calls_done


def efficiency_report(c: Contraction, s: SizeModel, m: MachineConfig, backend: KernelBackend,
                      *, execute: bool = False, budget_s: float = 900.0, stage: str = "first-iter",
                      algorithms: Sequence[Algorithm] | None = None, seed: int = 0) -> list[EfficiencyRow]:
    """Execution time of each algorithm over the time spent benchmarking it.

    Executing full algorithms is opt-in (``execute=True``).  An execution that
    runs past ``budget_s`` is stopped; its ratio is then a lower bound.  On a
    backend that models time, both sides are modeled: the prediction itself
    against the sum of the variant medians.
    """
    if not execute:
        raise PredictionError("efficiency_report executes every algorithm; pass execute=True to opt in")
    algorithms = algorithms if algorithms is not None else generate_algorithms(c)
    rows = []
    for a in algorithms:
        calls_total = sum(n for _, n in call_counts(a, s))
        p = predict(a, s, m, backend, stage, seed=seed)
        if backend.models_time:
            bench = sum(v.median_ns for v in p.per_variant)
            rows.append(EfficiencyRow(a.name, a.kernel, round(p.total_time_ns), round(bench),
                                      p.total_time_ns / bench, False, calls_total, calls_total))
            continue
        ws = Workspace.full(algorithm_tensors(a), s, seed, m.cache)
        t0 = time.perf_counter_ns()
        try:
            done = execute_algorithm(a, ws, backend, deadline_ns=t0 + int(budget_s * 1e9))
            aborted = False
        except ExecutionAborted as exc:
            done, aborted = exc.done, True
        elapsed = time.perf_counter_ns() - t0
        rows.append(EfficiencyRow(a.name, a.kernel, elapsed, p.benchmark_wall_ns,
                                  elapsed / p.benchmark_wall_ns, aborted, done, calls_total))
    return rows

