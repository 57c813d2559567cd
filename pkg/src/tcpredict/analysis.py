"""Symbolic access-distance, prefetch and benchmark-variant analysis.

Distances are found by walking the loop nest backwards from a call until the
previous access to the operand (or the root) is reached, collecting the
regions touched in between.  Operands of a single call are treated as
accessed simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .contraction import (
    Bound,
    FirstLine,
    Full,
    MemoryRegion,
    SizeModel,
    join_all,
    region_size,
    regions_total_size,
)
from .generator import Algorithm, KernelCall, Loop, invocation_count, walk_calls


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int = 6 * 1024 * 1024
    line_bytes: int = 64
    element_bytes: int = 8
    associativity: str = "full"
    policy: str = "LRU"

    def __post_init__(self):
        if self.capacity_bytes <= 0 or self.line_bytes <= 0 or self.element_bytes <= 0:
            raise ValueError("cache sizes must be positive")
        if self.capacity_bytes % self.line_bytes:
            raise ValueError("capacity must be a multiple of the line size")
        if self.line_bytes < self.element_bytes or self.line_bytes % self.element_bytes:
            raise ValueError("a line must hold a whole number (>= 1) of elements")

    @property
    def line_elements(self) -> int:
        return self.line_bytes // self.element_bytes

    @property
    def capacity_elements(self) -> int:
        return self.capacity_bytes // self.element_bytes

    @property
    def capacity_lines(self) -> int:
        return self.capacity_bytes // self.line_bytes


@dataclass(frozen=True)
class OperandAnalysis:
    operand: MemoryRegion
    slot: int  # position in the call signature: 0 = output, 1.. = inputs
    access_distance: int | None  # None: cold (never reused, root treated as flushed)
    M: frozenset = frozenset()
    prefetched: bool = False
    prefetch_distance: int | None = None
    prefetch_region: MemoryRegion | None = None
    line_sharing: bool = False


@dataclass(frozen=True)
class BenchmarkVariant:
    label: str
    per_operand: tuple[OperandAnalysis, ...]
    weight: int
    call: KernelCall | None = None
    env: dict = field(default_factory=dict, compare=False)


# -- tree navigation ---------------------------------------------------------


def _locate(tree: tuple, target: KernelCall):
    """Frames (body, position) from the root body down to ``target``, and
    the loops whose bodies are frames[1:]."""

    def rec(body, frames, loops):
        for pos, node in enumerate(body):
            here = frames + [(body, pos)]
            if node is target or (not isinstance(node, Loop) and node == target):
                return here, loops
            if isinstance(node, Loop):
                found = rec(node.body, here, loops + [node])
                if found:
                    return found
        return None

    found = rec(tree, [], [])
    if not found:
        raise AnalysisError(f"call {target} not found in the algorithm")
    return found


def _loop_indices(node) -> list[str]:
    if isinstance(node, Loop):
        out = [node.index]
        for child in node.body:
            out.extend(_loop_indices(child))
        return out
    return []


def _regions(node, extra_join: Sequence[str] = ()) -> set[MemoryRegion]:
    """All operand regions of calls in ``node`` joined across the loops
    inside it and across ``extra_join``."""
    if isinstance(node, Loop):
        out = set()
        for call, inner in walk_calls((node,)):
            out.update(join_all(r, tuple(inner) + tuple(extra_join)) for r in call.operands)
        return out
    return {join_all(r, extra_join) for r in node.operands}


def _overlaps(a: MemoryRegion, b: MemoryRegion) -> bool:
    # one region per tensor and call: same tensor at the same iteration overlaps
    return a.tensor == b.tensor


def _touches(node, tracked: MemoryRegion) -> bool:
    return any(_overlaps(r, tracked) for r in _regions(node))


def _back_traverse(frames, loops, depth, tracked, M, cold_root=False):
    """Walk upward from frames[depth]; returns (M, case) where case is
    'found', 'invariant' or 'root'."""
    M = set(M)
    while True:
        body, pos = frames[depth]
        for node in reversed(body[:pos]):
            if _touches(node, tracked):
                return M, "found"
            M |= _regions(node)
        if depth == 0:
            if cold_root:
                return None, "root"
            # repeated execution: everything after it in the previous run
            for node in reversed(body[pos + 1:]):
                if _touches(node, tracked):
                    break
                M |= _regions(node)
            return M, "root"
        loop = loops[depth - 1]
        if not tracked.depends_on(loop.index):
            for node in reversed(body[pos + 1:]):
                if _touches(node, tracked):
                    break
                M |= _regions(node)
            return M, "invariant"
        # operand varies across this loop: everything in the loop body, joined
        M = set()
        for node in loop.body:
            M |= _regions(node, (loop.index,))
        tracked = join_all(tracked, (loop.index,))
        depth -= 1


def _prefetch_condition(operand: MemoryRegion, loop: Loop | None) -> tuple[bool, bool]:
    """(prefetched, via cache-line sharing) from the syntactic conditions."""
    if loop is None or not operand.depends_on(loop.index):
        return False, False
    pos = operand.tensor.dims.index(loop.index)
    if pos == 0:
        return True, True
    if pos == 1:
        # the first dimension is either accessed entirely (Full) or is a single
        # element (Bound), which fits in one cache line
        first = operand.selectors[0]
        return isinstance(first, (Full, Bound, FirstLine)), False
    return False, False


def prefetch_region(operand: MemoryRegion) -> MemoryRegion:
    first = operand.selectors[0]
    if isinstance(first, Full):
        return MemoryRegion(operand.tensor, (FirstLine(operand.tensor.dims[0]),) + operand.selectors[1:])
    return operand


# -- public operations -------------------------------------------------------


def access_distance(a: Algorithm, operand: MemoryRegion, s: SizeModel,
                    call: KernelCall | None = None, cold_root: bool = False) -> OperandAnalysis:
    call = call or a.main_call
    if operand not in call.operands:
        raise AnalysisError(f"operand {operand} is not used by {call}")
    frames, loops = _locate(a.tree, call)
    M, case = _back_traverse(frames, loops, len(frames) - 1, operand, set(), cold_root)
    slot = call.operands.index(operand)
    if M is None:
        return OperandAnalysis(operand, slot, None, frozenset())
    M = frozenset(M)
    return OperandAnalysis(operand, slot, regions_total_size(M, s), M)


def detect_prefetch(a: Algorithm, operand: MemoryRegion, s: SizeModel,
                    call: KernelCall | None = None) -> tuple[bool, int | None, bool]:
    """(prefetched, prefetch distance, via line sharing)."""
    call = call or a.main_call
    frames, loops = _locate(a.tree, call)
    loop = loops[-1] if loops else None
    ok, sharing = _prefetch_condition(operand, loop)
    if not ok:
        return False, None, False
    # as if touched in the previous iteration of the surrounding loop
    body, pos = frames[-1]
    M = set()
    for node in reversed(body[:pos]):
        if _touches(node, operand):
            break
        M |= _regions(node)
    else:
        for node in reversed(body[pos + 1:]):
            if _touches(node, operand):
                break
            M |= _regions(node)
    return True, regions_total_size(M, s), sharing


def analyze_call(a: Algorithm, s: SizeModel, call: KernelCall | None = None,
                 cold_root: bool = False, prefetch: bool = True) -> tuple[OperandAnalysis, ...]:
    call = call or a.main_call
    out = []
    for op in call.operands:
        oa = access_distance(a, op, s, call, cold_root)
        if prefetch:
            pf, dist, sharing = detect_prefetch(a, op, s, call)
            if pf:
                oa = replace(oa, prefetched=True, prefetch_distance=dist,
                             prefetch_region=prefetch_region(op), line_sharing=sharing)
        out.append(oa)
    return tuple(out)


def first_iteration_analysis(a: Algorithm, s: SizeModel, level: int,
                             call: KernelCall | None = None,
                             cold_root: bool = False) -> tuple[OperandAnalysis, ...]:
    """Distances for the first iteration of the ``level``-th innermost loop
    (1 = innermost).  No prefetching applies: the previous iteration of the
    innermost loop did not happen."""
    call = call or a.main_call
    frames, loops = _locate(a.tree, call)
    n = len(loops)
    if not 1 <= level <= n:
        raise AnalysisError(f"level {level} outside 1..{n}")
    start = loops[n - level]
    swept = [lp.index for lp in loops[n - level:]]
    M0 = set()
    for node in start.body:
        M0 |= _regions(node, (start.index,))
    out = []
    for slot, op in enumerate(call.operands):
        tracked = join_all(op, swept)
        M, case = _back_traverse(frames, loops, n - level, tracked, M0, cold_root)
        if M is None:
            out.append(OperandAnalysis(op, slot, None))
        else:
            out.append(OperandAnalysis(op, slot, regions_total_size(M, s), frozenset(M)))
    return tuple(out)


def _loops_of(a: Algorithm, call: KernelCall) -> list[Loop]:
    return _locate(a.tree, call)[1]


def first_iteration_levels(a: Algorithm, s: SizeModel, threshold: float = 0.01,
                           call: KernelCall | None = None) -> list[tuple[int, int]]:
    """(level, number of loop starts) for loops whose first iterations exceed
    ``threshold`` of all invocations, innermost outward, stopping at the
    first level below it."""
    call = call or a.main_call
    loops = _loops_of(a, call)
    total = math.prod(s[lp.index] for lp in loops)
    out = []
    starts = total
    for level, lp in enumerate(reversed(loops), start=1):
        starts //= s[lp.index]
        if starts <= threshold * total:
            break
        out.append((level, starts))
    return out


def enumerate_variants(a: Algorithm, s: SizeModel, cache: CacheConfig,
                       threshold: float = 0.01, *, prefetch: bool = True,
                       failures: bool = True, first_iterations: bool = True,
                       cold_root: bool = False) -> list[BenchmarkVariant]:
    """Weighted benchmark scenarios of the main kernel; weights sum to the
    invocation count."""
    call = a.main_call
    loops = _loops_of(a, call)
    total = invocation_count(a, s)
    steady_ops = analyze_call(a, s, call, cold_root, prefetch)
    variants = []

    levels = first_iteration_levels(a, s, threshold, call) if first_iterations and loops else []
    for n, (level, starts) in enumerate(levels):
        weight = starts - (levels[n + 1][1] if n + 1 < len(levels) else 0)
        name = loops[len(loops) - level].index
        variants.append(BenchmarkVariant(
            f"firstIteration({name})",
            first_iteration_analysis(a, s, level, call, cold_root),
            weight, call))

    if prefetch and failures and any(o.line_sharing for o in steady_ops):
        inner = s[loops[-1].index]
        outer = total // inner
        crossings = (inner - 1) if levels else inner
        weight = (crossings // cache.line_elements) * outer
        if weight:
            failed = tuple(
                replace(o, prefetched=False, prefetch_distance=None, prefetch_region=None,
                        line_sharing=False) if o.line_sharing else o
                for o in steady_ops)
            variants.append(BenchmarkVariant("prefetchFailure", failed, weight, call))

    rest = total - sum(v.weight for v in variants)
    if rest < 0:
        raise AnalysisError(f"{a.name}: variant weights exceed the invocation count")
    return [BenchmarkVariant("steady", steady_ops, rest, call)] + variants


def copy_variants(a: Algorithm, s: SizeModel, *, prefetch: bool = True,
                  cold_root: bool = False) -> list[BenchmarkVariant]:
    """One steady variant per copy call, weighted by its call count."""
    out = []
    for n, (call, loops) in enumerate((c, l) for c, l in walk_calls(a.tree) if c.kind == "copy"):
        count = math.prod(s[i] for i in loops)
        ops = analyze_call(a, s, call, cold_root, prefetch)
        out.append(BenchmarkVariant(f"copy{n}:steady", ops, count, call))
    return out


def describe(oa: OperandAnalysis, s: SizeModel) -> str:
    M = "{" + ", ".join(sorted(str(r) for r in oa.M)) + "}" if oa.M else "{}"
    dist = "cold" if oa.access_distance is None else f"{oa.access_distance:,}"
    pf = f"prefetch@{oa.prefetch_distance:,}" if oa.prefetched else "-"
    return f"{str(oa.operand):<16} {region_size(oa.operand, s):>12,}  {M:<40} {dist:>14}  {pf}"
