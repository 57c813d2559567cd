"""Micro-benchmarks: setup replay followed by one timed kernel call."""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .analysis import BenchmarkVariant, CacheConfig
from .backends import BackendError, KernelBackend, Workspace
from .contraction import Contraction, SizeModel
from .setup import SetupList

REPETITIONS = 10
ENV_PREFIX = "TCPREDICT_"

# one benchmark at a time, process-wide
BENCHMARK_LOCK = threading.Lock()


@dataclass(frozen=True)
class MachineConfig:
    clock_hz: float = 2.0e9
    flops_per_cycle: float = 4.0
    cache: CacheConfig = field(default_factory=CacheConfig)
    threads: int = 1

    def __post_init__(self):
        if self.clock_hz <= 0 or self.flops_per_cycle <= 0 or self.threads < 1:
            raise ValueError("machine parameters must be positive")

    @property
    def peak_flops_per_cycle(self) -> float:
        return self.flops_per_cycle * self.threads

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "MachineConfig | None" = None) -> "MachineConfig":
        m = base or cls()
        cache = dict(capacity_bytes=m.cache.capacity_bytes, line_bytes=m.cache.line_bytes,
                     element_bytes=m.cache.element_bytes)
        top = dict(clock_hz=m.clock_hz, flops_per_cycle=m.flops_per_cycle, threads=m.threads)
        keys = {"cache_bytes": "capacity_bytes", "line_bytes": "line_bytes", "element_bytes": "element_bytes"}
        for key, raw in values.items():
            key = key.strip().lower()
            if key in keys:
                cache[keys[key]] = int(raw)
            elif key in ("clock_hz", "flops_per_cycle"):
                top[key] = float(raw)
            elif key == "threads":
                top[key] = int(raw)
            else:
                raise ValueError(f"unknown machine setting {key!r}")
        return cls(top["clock_hz"], top["flops_per_cycle"], CacheConfig(**cache), top["threads"])

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, environ: Mapping[str, str] | None = None) -> "MachineConfig":
        """Defaults, then a ``key=value`` file, then TCPREDICT_<KEY> variables."""
        values: dict[str, str] = {}
        if path:
            for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{n}: expected key=value")
                values[key.strip()] = val.strip()
        environ = os.environ if environ is None else environ
        for key, val in environ.items():
            if key.startswith(ENV_PREFIX):
                values[key[len(ENV_PREFIX):].lower()] = val
        return cls.from_mapping(values)


@dataclass
class TimingResult:
    samples_ns: list[float]
    median_ns: float
    backend_id: str
    variant_label: str
    warnings: list[str] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    wall_ns: int = 0  # total wall time spent, setup included


def lower_median(samples) -> float:
    ordered = sorted(samples)
    return ordered[(len(ordered) - 1) // 2]


def timer_resolution_ns() -> float:
    info = time.get_clock_info("perf_counter")
    best = math.inf
    for _ in range(20):
        t0 = time.perf_counter_ns()
        t1 = time.perf_counter_ns()
        while t1 == t0:
            t1 = time.perf_counter_ns()
        best = min(best, t1 - t0)
    return max(info.resolution * 1e9, best)


def flops_of(c: Contraction, s: SizeModel) -> int:
    return 2 * math.prod(s[i] for i in c.contracted + c.freeA + c.freeB)


def variant_env(v: BenchmarkVariant, s: SizeModel) -> dict[str, int]:
    """Loop iterators for the benchmarked call: the variant's own, else the
    second iteration of every loop (a steady-state position)."""
    env = {i: min(1, s[i] - 1) for i in s.assignment}
    env.update(v.env)
    return env


def run_micro_benchmark(v: BenchmarkVariant, sl: SetupList, backend: KernelBackend,
                        m: MachineConfig, s: SizeModel, repetitions: int = REPETITIONS,
                        seed: int = 0) -> TimingResult:
    call = v.call
    if call is None:
        raise BackendError(f"variant {v.label} has no kernel call")
    if not backend.supports(call.kind):
        raise BackendError(f"backend {backend.identity} does not support {call.kind}")
    env = variant_env(v, s)
    regions = list(call.operands) + [a.region for a in sl.actions if a.region is not None]
    with BENCHMARK_LOCK:
        wall0 = time.perf_counter_ns()
        try:
            ws = Workspace.for_regions(regions, env, s, seed, m.cache)
        except MemoryError as exc:
            raise BackendError(f"cannot allocate operands for {v.label}: {exc}") from exc
        backend.reset()
        samples: list[float] = []
        events: list[tuple[int, str]] = []
        tick = 0
        for rep in range(repetitions):
            if not sl.omitted:
                for act in sl.actions:
                    if act.kind == "remote":
                        backend.touch_remote(act.size, ws)
                    else:
                        backend.touch(act.region, env, ws)
                    events.append((tick, f"setup:{rep}"))
                    tick += 1
            events.append((tick, f"start:{rep}"))
            tick += 1
            t0 = time.perf_counter_ns()
            modeled = backend.execute(call, env, ws)
            t1 = time.perf_counter_ns()
            events.append((tick, f"stop:{rep}"))
            tick += 1
            samples.append(float(modeled) if modeled is not None else float(t1 - t0))
        wall = time.perf_counter_ns() - wall0

    warnings = []
    if not backend.models_time:
        res = timer_resolution_ns()
        if min(samples) < 100 * res:
            warnings.append(f"timer resolution {res:.0f} ns exceeds 1% of the fastest sample "
                            f"({min(samples):.0f} ns)")
    return TimingResult(samples, lower_median(samples), backend.identity, v.label, warnings, events, wall)
