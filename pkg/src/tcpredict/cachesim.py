"""Element traces of loop nests and a fully associative LRU simulator.

This is the brute-force side: it expands every loop and records each
element access, so it only scales to small extents.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .analysis import CacheConfig
from .contraction import MemoryRegion, SizeModel, region_offsets
from .generator import Algorithm, KernelCall, Loop

DEFAULT_CAP = 10**7


class TraceTooLarge(RuntimeError):
    pass


@dataclass
class CallRecord:
    ordinal: int
    call: KernelCall
    loops: tuple[str, ...]
    env: dict[str, int]
    start: int  # first access position in the trace
    stop: int
    is_main: bool
    run: int = 0
    sizes: tuple[int, ...] = ()  # accesses per operand slot


@dataclass
class Trace:
    """Accesses as parallel arrays; every access has width one element and
    ``tags`` is the ordinal of the issuing call (non-decreasing)."""

    tensors: list[str]
    tensor_ids: np.ndarray
    offsets: np.ndarray
    tags: np.ndarray
    calls: list[CallRecord] = field(default_factory=list)
    runs: int = 1

    def __len__(self):
        return len(self.offsets)

    @property
    def widths(self) -> np.ndarray:
        return np.ones(len(self.offsets), dtype=np.int64)

    def main_calls(self, run: int | None = None) -> list[CallRecord]:
        return [c for c in self.calls if c.is_main and (run is None or c.run == run)]

    def elements(self, rec: CallRecord, slot: int | None = None) -> set[tuple[int, int]]:
        """(tensor id, offset) pairs touched by a call, or by one operand."""
        ids = self.tensor_ids[rec.start:rec.stop]
        offs = self.offsets[rec.start:rec.stop]
        if slot is not None:
            lo, hi = _operand_span(rec, slot, self)
            ids, offs = self.tensor_ids[lo:hi], self.offsets[lo:hi]
        return set(zip(ids.tolist(), offs.tolist()))

    def to_text(self) -> str:
        lines = []
        for t, o, g in zip(self.tensor_ids.tolist(), self.offsets.tolist(), self.tags.tolist()):
            lines.append(f"{g} {self.tensors[t]} {o} 1")
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        """Fixed-width little-endian records: u32 tag, u16 tensor, u16 width, u64 offset."""
        rec = np.zeros(len(self), dtype=[("tag", "<u4"), ("tensor", "<u2"), ("width", "<u2"), ("offset", "<u8")])
        rec["tag"], rec["tensor"], rec["width"], rec["offset"] = self.tags, self.tensor_ids, 1, self.offsets
        return rec.tobytes()


def _operand_span(rec: CallRecord, slot: int, trace: Trace) -> tuple[int, int]:
    # accesses are laid out inputs first, then the output
    sizes = rec.sizes
    order = list(range(1, len(sizes))) + [0]
    pos = rec.start
    for k in order:
        if k == slot:
            return pos, pos + sizes[k]
        pos += sizes[k]
    raise IndexError(slot)


def _iterate(nodes, env, loops):
    for node in nodes:
        if isinstance(node, Loop):
            for v in range(env["__sizes__"][node.index]):
                env[node.index] = v
                yield from _iterate(node.body, env, loops + (node.index,))
            del env[node.index]
        else:
            yield node, loops, {k: v for k, v in env.items() if k != "__sizes__"}


def estimate_trace_length(a: Algorithm, s: SizeModel, runs: int = 1) -> int:
    from .generator import walk_calls
    from .contraction import region_size

    total = 0
    for call, loops in walk_calls(a.tree):
        n = math.prod(s[i] for i in loops)
        total += n * sum(region_size(r, s) for r in call.operands)
    return total * runs


def trace_algorithm(a: Algorithm, s: SizeModel, cap: int = DEFAULT_CAP, runs: int = 1) -> Trace:
    """Expand the loop nest into an element trace.

    ``runs`` > 1 repeats the whole algorithm back to back, matching repeated
    executions of the contraction.
    """
    need = estimate_trace_length(a, s, runs)
    if need > cap:
        raise TraceTooLarge(
            f"{a.name}: trace would have {need:,} accesses (cap {cap:,}); "
            "reduce the index sizes or raise the cap")
    names: list[str] = []
    ids: dict[str, int] = {}

    def tid(region: MemoryRegion) -> int:
        name = region.tensor.name
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
        return ids[name]

    t_ids, offs, tags, calls = [], [], [], []
    main = a.main_call
    ordinal = 0
    for run in range(runs):
        for call, loops, env in _iterate(a.tree, {"__sizes__": dict(s.assignment)}, ()):
            start = len(offs)
            sizes = [0] * len(call.operands)
            for k in list(range(1, len(call.operands))) + [0]:
                r = call.operands[k]
                o = region_offsets(r, s, env)
                sizes[k] = len(o)
                t = tid(r)
                t_ids.extend([t] * len(o))
                offs.extend(o)
            tags.extend([ordinal] * (len(offs) - start))
            calls.append(CallRecord(ordinal, call, loops, env, start, len(offs),
                                    call == main, run, tuple(sizes)))
            ordinal += 1
    return Trace(names, np.asarray(t_ids, dtype=np.int64), np.asarray(offs, dtype=np.int64),
                 np.asarray(tags, dtype=np.int64), calls, runs)


# -- LRU ---------------------------------------------------------------------


class LruCache:
    """Fully associative LRU over hashable line ids.

    ``touch_fresh`` inserts lines that are never reused (remote buffer reads)
    as one anonymous block, so flushing costs O(resident entries).
    """

    def __init__(self, capacity_lines: int):
        self.capacity = capacity_lines
        self._lines: OrderedDict = OrderedDict()  # key -> slot count, MRU last
        self._used = 0
        self._fresh = 0

    def __len__(self):
        return self._used

    def __contains__(self, line):
        return line in self._lines

    def access(self, line: Hashable) -> bool:
        if line in self._lines:
            self._lines.move_to_end(line)
            return True
        self._lines[line] = 1
        self._used += 1
        self._evict()
        return False

    def touch_fresh(self, n_lines: int):
        n = min(n_lines, self.capacity)
        if n <= 0:
            return
        self._fresh += 1
        self._lines[("__fresh__", self._fresh)] = n
        self._used += n
        self._evict()

    def _evict(self):
        while self._used > self.capacity:
            key, count = self._lines.popitem(last=False)
            excess = self._used - self.capacity
            if count > excess:
                self._lines[key] = count - excess
                self._lines.move_to_end(key, last=False)
                self._used -= excess
            else:
                self._used -= count

    def resident(self) -> list:
        """Resident real lines, most recently used first."""
        return [k for k in reversed(self._lines) if not (isinstance(k, tuple) and k and k[0] == "__fresh__")]


class _Fenwick:
    def __init__(self, n):
        self.n = n
        self.tree = [0] * (n + 1)

    def add(self, i, v):
        i += 1
        while i <= self.n:
            self.tree[i] += v
            i += i & -i

    def prefix(self, i):  # sum of [0, i)
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s


def stack_distances(keys: Sequence[Hashable]) -> np.ndarray:
    """Distinct keys accessed between consecutive uses of each key; -1 on
    first use."""
    n = len(keys)
    bit = _Fenwick(n)
    last: dict = {}
    out = np.full(n, -1, dtype=np.int64)
    for t, k in enumerate(keys):
        p = last.get(k)
        if p is not None:
            out[t] = bit.prefix(t) - bit.prefix(p + 1)
            bit.add(p, -1)
        bit.add(t, 1)
        last[k] = t
    return out


@dataclass
class SimResult:
    hits: np.ndarray
    line_distance: np.ndarray
    element_distance: np.ndarray

    @property
    def misses(self) -> int:
        return int((~self.hits).sum())

    @property
    def hit_count(self) -> int:
        return int(self.hits.sum())


def line_keys(trace: Trace, line_elements: int) -> list[tuple[int, int]]:
    return list(zip(trace.tensor_ids.tolist(), (trace.offsets // line_elements).tolist()))


def simulate(trace: Trace, cache: CacheConfig) -> SimResult:
    """LRU hit/miss per access plus reuse distances in lines and elements."""
    lines = line_keys(trace, cache.line_elements)
    ld = stack_distances(lines)
    ed = stack_distances(list(zip(trace.tensor_ids.tolist(), trace.offsets.tolist())))
    hits = (ld >= 0) & (ld < cache.capacity_lines)
    return SimResult(hits, ld, ed)


def simulate_lru(trace: Trace, cache: CacheConfig) -> np.ndarray:
    """Hit flags from an explicit LRU replay (cross-check for ``simulate``)."""
    lru = LruCache(cache.capacity_lines)
    return np.array([lru.access(k) for k in line_keys(trace, cache.line_elements)], dtype=bool)


# -- measured distances ------------------------------------------------------


@dataclass
class MeasuredDistance:
    region_join: int  # per-tensor distinct elements over the aligned window
    raw: int  # distinct elements strictly between the two accesses
    root: bool  # operand not touched earlier in the same run
    window: list[int] = field(default_factory=list)  # call ordinals


def find_invocation(trace: Trace, env: Mapping[str, int], run: int | None = None) -> CallRecord:
    for rec in trace.main_calls(run):
        if all(rec.env.get(k) == v for k, v in env.items()):
            return rec
    raise KeyError(f"no main-kernel invocation at {dict(env)}")


def measured_access_distance(trace: Trace, slot: int, k: CallRecord) -> MeasuredDistance:
    """Distance of operand ``slot`` of invocation ``k`` measured on the trace.

    The region-join count takes the previous call touching the operand, finds
    the outermost enclosing loop whose iterator changed since then, and counts
    per tensor the distinct elements touched by one whole iteration of that
    loop's body at the current outer iterators (leaving out ``k`` itself when
    that loop directly encloses it).  Calls in the same iteration are
    measured strictly in between.
    """
    target = trace.elements(k, slot)
    calls = trace.calls
    prev = None
    for rec in reversed(calls[:k.ordinal]):
        if trace.elements(rec) & target:
            prev = rec
            break

    if prev is None or prev.run != k.run:
        # the repetition itself acts as the outermost loop
        window = [rec for rec in calls if rec.run == k.run and (rec is not k or k.loops)]
        raw_lo, raw_hi = (None, None) if prev is None else (prev.stop, k.start)
    else:
        common = 0
        while (common < min(len(prev.loops), len(k.loops))
               and prev.loops[common] == k.loops[common]):
            common += 1
        changed = [n for n in range(common) if prev.env[k.loops[n]] != k.env[k.loops[n]]]
        if not changed:
            window = calls[prev.ordinal + 1:k.ordinal]
        else:
            stop = changed[0]
            prefix = k.loops[:stop + 1]
            window = [rec for rec in calls
                      if rec.run == k.run and rec.loops[:stop + 1] == prefix
                      and all(rec.env[i] == k.env[i] for i in prefix)]
            if stop == len(k.loops) - 1:
                window = [rec for rec in window if rec is not k]
        raw_lo, raw_hi = prev.stop, k.start

    per_tensor: dict[int, set] = {}
    for rec in window:
        for t, o in trace.elements(rec):
            per_tensor.setdefault(t, set()).add(o)
    region_join = sum(len(v) for v in per_tensor.values())

    if raw_lo is None:
        mask = np.ones(len(trace), dtype=bool)
        mask[k.start:k.stop] = False
        pairs = set(zip(trace.tensor_ids[mask].tolist(), trace.offsets[mask].tolist()))
    else:
        pairs = set(zip(trace.tensor_ids[raw_lo:raw_hi].tolist(), trace.offsets[raw_lo:raw_hi].tolist()))
    return MeasuredDistance(region_join, len(pairs), prev is None or prev.run != k.run, [r.ordinal for r in window])


def previous_inner_iteration(trace: Trace, k: CallRecord) -> CallRecord | None:
    if not k.loops:
        return None
    inner = k.loops[-1]
    if k.env[inner] == 0:
        return None
    env = dict(k.env)
    env[inner] -= 1
    return find_invocation(trace, env, k.run)


def measured_prefetch(trace: Trace, slot: int, k: CallRecord, leading_dim: int) -> bool:
    """Trace-level prefetch detection: the operand moved since the previous
    iteration of the innermost loop, by a shift of at most one column of its
    tensor (line sharing along the first dimension, or adjacency along the
    second)."""
    prev = previous_inner_iteration(trace, k)
    if prev is None:
        return False
    now = sorted(o for _, o in trace.elements(k, slot))
    before = sorted(o for _, o in trace.elements(prev, slot))
    if now == before:
        return False
    delta = now[0] - before[0]
    if [o - delta for o in now] != before:
        return False
    return 0 < delta <= leading_dim


def replay_keys(actions: Iterable, s: SizeModel, env: Mapping[str, int], line_elements: int,
                tensor_ids: Mapping[str, int]) -> list:
    """Line keys for a setup list; remote accesses become unique fresh keys."""
    keys = []
    fresh = itertools.count()
    for act in actions:
        if act.kind == "remote":
            for _ in range(-(-act.size // line_elements)):
                keys.append(("remote", next(fresh)))
        else:
            offs = region_offsets(act.region, s, env, line_elements)
            t = tensor_ids.get(act.region.tensor.name, act.region.tensor.name)
            seen = []
            for o in offs:
                key = (t, o // line_elements)
                if key not in seen:
                    seen.append(key)
            keys.extend(seen)
    return keys


# -- residency ---------------------------------------------------------------


def _operand_lines(trace: Trace, region: MemoryRegion, s: SizeModel, env, line_elements: int) -> set:
    t = trace.tensors.index(region.tensor.name)
    return {(t, o // line_elements) for o in region_offsets(region, s, env)}


def residency_in_algorithm(trace: Trace, k: CallRecord, s: SizeModel, cache: CacheConfig) -> list[set]:
    """Per operand of ``k``, the lines resident just before it runs."""
    lru = LruCache(cache.capacity_lines)
    for key in line_keys(trace, cache.line_elements)[:k.start]:
        lru.access(key)
    return [{ln for ln in _operand_lines(trace, r, s, k.env, cache.line_elements) if ln in lru}
            for r in k.call.operands]


def residency_after_setup(trace: Trace, k: CallRecord, setup, s: SizeModel, cache: CacheConfig) -> list[set]:
    """Per operand of ``k``, the lines resident after replaying ``setup`` on
    an empty cache."""
    lru = LruCache(cache.capacity_lines)
    ids = {n: i for i, n in enumerate(trace.tensors)}
    for key in replay_keys(setup, s, k.env, cache.line_elements, ids):
        lru.access(key)
    return [{ln for ln in _operand_lines(trace, r, s, k.env, cache.line_elements) if ln in lru}
            for r in k.call.operands]


def steady_invocation(trace: Trace, run: int | None = None) -> CallRecord:
    """First main-kernel invocation with no enclosing loop at its first iteration."""
    run = trace.runs - 1 if run is None else run
    for rec in trace.main_calls(run):
        if all(rec.env[i] > 0 for i in rec.loops):
            return rec
    raise ValueError("no steady-state invocation: some loop has extent 1")
