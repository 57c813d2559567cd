"""Kernel backends and operand buffers.

A backend runs one kernel call on operand regions held in a ``Workspace``.
Real backends (reference, native) are timed by the caller; the synthetic
backend instead returns a modeled duration from an LRU replay.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
from typing import Mapping, Sequence

import numpy as np

from .analysis import CacheConfig
from .contraction import Bound, FirstLine, MemoryRegion, SizeModel, region_offset_array, strides
from .cachesim import LruCache
from .generator import KERNEL_KINDS, Algorithm, KernelCall, Loop

PAGE_BYTES = 4096


class BackendError(RuntimeError):
    pass


def _aligned_zeros(n: int) -> np.ndarray:
    raw = np.zeros(n + PAGE_BYTES // 8, dtype=np.float64)
    shift = (-raw.ctypes.data % PAGE_BYTES) // 8
    return raw[shift:shift + n]


def region_span(r: MemoryRegion, s: SizeModel, env: Mapping[str, int]) -> tuple[int, int]:
    """[first, last] flat offsets touched by a region."""
    lo = hi = 0
    for dim, sel, st in zip(r.tensor.dims, r.selectors, strides(r.tensor, s)):
        if isinstance(sel, Bound):
            lo += env[sel.index] * st
            hi += env[sel.index] * st
        else:
            hi += (s[dim] - 1) * st
    return lo, hi


class Workspace:
    """Flat Fortran-order buffers per tensor, optionally covering only the
    span of offsets actually used (so huge tensors are never allocated)."""

    def __init__(self, s: SizeModel, cache: CacheConfig | None = None):
        self.s = s
        self.cache = cache or CacheConfig()
        self.buffers: dict[str, tuple[np.ndarray, int]] = {}
        self.remote: np.ndarray | None = None
        self.cursor = 0

    @classmethod
    def full(cls, tensors, s: SizeModel, seed: int = 0, cache: CacheConfig | None = None) -> "Workspace":
        ws = cls(s, cache)
        rng = np.random.default_rng(seed)
        for t in tensors:
            n = math.prod(s[d] for d in t.dims)
            arr = _aligned_zeros(n)
            # NaN exposes any read of a temporary before its copy fills it
            arr[:] = np.nan if t.role == "temporary" else rng.standard_normal(n)
            ws.buffers[t.name] = (arr, 0)
        return ws

    @classmethod
    def for_regions(cls, regions: Sequence[MemoryRegion], env: Mapping[str, int], s: SizeModel,
                    seed: int = 0, cache: CacheConfig | None = None) -> "Workspace":
        ws = cls(s, cache)
        rng = np.random.default_rng(seed)
        spans: dict[str, list[int]] = {}
        for r in regions:
            lo, hi = region_span(r, s, env)
            cur = spans.setdefault(r.tensor.name, [lo, hi])
            cur[0], cur[1] = min(cur[0], lo), max(cur[1], hi)
        for name, (lo, hi) in sorted(spans.items()):
            arr = _aligned_zeros(hi - lo + 1)
            arr[:] = 1.0
            ws.buffers[name] = (arr, lo)
        # random values only where the regions read; strided spans can be
        # far larger than the regions inside them
        for r in regions:
            arr, lo = ws.buffers[r.tensor.name]
            idx = region_offset_array(r, s, env, ws.cache.line_elements) - lo
            arr[idx] = rng.standard_normal(len(idx))
        return ws

    def array(self, name: str) -> np.ndarray:
        return self.buffers[name][0]

    def view(self, r: MemoryRegion, env: Mapping[str, int]) -> np.ndarray:
        arr, base = self.buffers[r.tensor.name]
        offset = -base
        shape, byte_strides = [], []
        for dim, sel, st in zip(r.tensor.dims, r.selectors, strides(r.tensor, self.s)):
            if isinstance(sel, Bound):
                offset += env[sel.index] * st
            else:
                extent = self.s[dim]
                if isinstance(sel, FirstLine):
                    extent = min(extent, self.cache.line_elements)
                shape.append(extent)
                byte_strides.append(st * 8)
        return np.ndarray(tuple(shape), dtype=np.float64, buffer=arr, offset=offset * 8,
                          strides=tuple(byte_strides))

    def ensure_remote(self, n_elements: int):
        if self.remote is None or len(self.remote) < n_elements:
            self.remote = _aligned_zeros(n_elements)
            self.remote[:] = 1.0
            self.cursor = 0


class KernelBackend:
    """Interface: ``execute`` one call; ``touch``/``touch_remote`` replay setup.

    ``execute`` returns a modeled duration in nanoseconds, or None when the
    caller should measure wall time.
    """

    identity = "abstract"
    kinds: frozenset = frozenset(KERNEL_KINDS)
    models_time = False

    def supports(self, kind: str) -> bool:
        return kind in self.kinds

    def execute(self, call: KernelCall, env: Mapping[str, int], ws: Workspace) -> float | None:
        raise NotImplementedError

    def touch(self, r: MemoryRegion, env: Mapping[str, int], ws: Workspace):
        # reading every element reads every line
        v = ws.view(r, env)
        float(v.sum())

    def touch_remote(self, n_elements: int, ws: Workspace):
        """Line-stride reads over a remote buffer with a rotating cursor."""
        line = ws.cache.line_elements
        size = max(2 * ws.cache.capacity_elements, 2 * n_elements)
        ws.ensure_remote(size)
        n_lines = -(-n_elements // line)
        start = ws.cursor
        idx = (start + line * np.arange(n_lines)) % len(ws.remote)
        float(ws.remote[idx].sum())
        ws.cursor = int((start + line * n_lines) % len(ws.remote))

    def reset(self):
        """Forget any modeled state (new variant)."""


def _labels(regions: Sequence[MemoryRegion]) -> dict[str, str]:
    letters = {}
    for r in regions:
        for d in r.kept_dims:
            letters.setdefault(d, chr(ord("a") + len(letters)))
    return letters


class ReferenceBackend(KernelBackend):
    """Straightforward numpy evaluation on strided views."""

    identity = "reference"

    def __init__(self):
        self._specs: dict[KernelCall, str] = {}

    def _spec(self, call: KernelCall) -> str:
        spec = self._specs.get(call)
        if spec is None:
            lab = _labels(call.operands)
            ins = ",".join("".join(lab[d] for d in r.kept_dims) for r in call.inputs)
            spec = f"{ins}->{''.join(lab[d] for d in call.output.kept_dims)}"
            self._specs[call] = spec
        return spec

    def execute(self, call, env, ws):
        out = ws.view(call.output, env)
        ins = [ws.view(r, env) for r in call.inputs]
        if call.kind == "copy":
            out[...] = np.einsum(self._spec(call), ins[0])
        else:
            out[...] += np.einsum(self._spec(call), *ins)
        return None


_ColMajor, _NoTrans, _Trans = 102, 111, 112


def find_blas() -> str | None:
    for name in ("openblas", "cblas", "blas"):
        path = ctypes.util.find_library(name)
        if path:
            try:
                lib = ctypes.CDLL(path)
                lib.cblas_dgemm
                return path
            except (OSError, AttributeError):
                continue
    return None


class NativeBackend(KernelBackend):
    """CBLAS through ctypes (OpenBLAS or any library exporting cblas_*)."""

    def __init__(self, library: str | None = None, threads: int = 1):
        path = library or find_blas()
        if not path:
            raise BackendError("no CBLAS library found (install OpenBLAS or pass its path)")
        try:
            self.lib = ctypes.CDLL(path)
        except OSError as exc:
            raise BackendError(f"cannot load {path}: {exc}") from exc
        self.identity = f"native:{path}"
        d, i, p = ctypes.c_double, ctypes.c_int, ctypes.c_void_p
        self.lib.cblas_ddot.restype = d
        self.lib.cblas_ddot.argtypes = [i, p, i, p, i]
        self.lib.cblas_daxpy.argtypes = [i, d, p, i, p, i]
        self.lib.cblas_dcopy.argtypes = [i, p, i, p, i]
        self.lib.cblas_dgemv.argtypes = [i, i, i, i, d, p, i, p, i, d, p, i]
        self.lib.cblas_dger.argtypes = [i, i, i, d, p, i, p, i, p, i]
        self.lib.cblas_dgemm.argtypes = [i, i, i, i, i, i, d, p, i, p, i, d, p, i]
        setter = getattr(self.lib, "openblas_set_num_threads", None)
        if setter is not None:
            setter.argtypes = [i]
            setter(max(1, threads))

    @staticmethod
    def _inc(v: np.ndarray) -> int:
        return v.strides[0] // 8 if v.ndim else 1

    @staticmethod
    def _ld(v: np.ndarray) -> int:
        return max(1, v.strides[1] // 8, v.shape[0])

    def execute(self, call, env, ws):
        L = self.lib
        out = ws.view(call.output, env)
        ins = [ws.view(r, env) for r in call.inputs]
        ptr = lambda v: v.ctypes.data
        if call.kind == "copy":
            src = ins[0]
            if src.ndim == 2:
                for q in range(src.shape[1]):
                    L.cblas_dcopy(src.shape[0], ptr(src[:, q]), self._inc(src[:, q]),
                                  ptr(out[:, q]), self._inc(out[:, q]))
            else:
                L.cblas_dcopy(src.shape[0] if src.ndim else 1, ptr(src), self._inc(src), ptr(out), self._inc(out))
            return None
        a, b = ins
        ra, rb = call.inputs
        if call.kind == "dot":
            out[()] += L.cblas_ddot(a.shape[0], ptr(a), self._inc(a), ptr(b), self._inc(b))
        elif call.kind == "axpy":
            x, alpha = (a, b) if a.ndim else (b, a)
            L.cblas_daxpy(x.shape[0], float(alpha[()]), ptr(x), self._inc(x), ptr(out), self._inc(out))
        elif call.kind == "gemv":
            mat, vec, t = (a, b, call.trans[0]) if a.ndim == 2 else (b, a, call.trans[1])
            L.cblas_dgemv(_ColMajor, _Trans if t else _NoTrans, mat.shape[0], mat.shape[1], 1.0,
                          ptr(mat), self._ld(mat), ptr(vec), self._inc(vec), 1.0, ptr(out), self._inc(out))
        elif call.kind == "ger":
            row = call.output.kept_dims[0]
            x, y = (a, b) if row in ra.kept_dims else (b, a)
            L.cblas_dger(_ColMajor, out.shape[0], out.shape[1], 1.0, ptr(x), self._inc(x),
                         ptr(y), self._inc(y), ptr(out), self._ld(out))
        elif call.kind == "gemm":
            row = call.output.kept_dims[0]
            a_first = row in ra.kept_dims
            first, second = (a, b) if a_first else (b, a)
            tf, ts = call.trans if a_first else call.trans[::-1]
            k = first.shape[0] if tf else first.shape[1]
            L.cblas_dgemm(_ColMajor, _Trans if tf else _NoTrans, _Trans if ts else _NoTrans,
                          out.shape[0], out.shape[1], k, 1.0, ptr(first), self._ld(first),
                          ptr(second), self._ld(second), 1.0, ptr(out), self._ld(out))
        else:
            raise BackendError(f"unsupported kernel {call.kind!r}")
        return None


def kernel_flops(call: KernelCall, s: SizeModel) -> int:
    if call.kind == "copy":
        return 0
    dims = {d for r in call.operands for d in r.kept_dims}
    return 2 * math.prod(s[d] for d in dims)


class SyntheticBackend(KernelBackend):
    """Deterministic cost model driven by an LRU replay.

    Duration = call_ns + hit_ns * hits + miss_ns * misses + flop_ns * flops,
    counting each distinct line of each operand once per call (inputs, then
    the output).
    """

    identity = "synthetic"
    models_time = True

    def __init__(self, cache: CacheConfig | None = None, call_ns: float = 50.0, hit_ns: float = 1.0,
                 miss_ns: float = 10.0, flop_ns: float = 0.25):
        self.cache = cache or CacheConfig()
        self.call_ns, self.hit_ns, self.miss_ns, self.flop_ns = call_ns, hit_ns, miss_ns, flop_ns
        self.identity = f"synthetic(call={call_ns},hit={hit_ns},miss={miss_ns},flop={flop_ns})"
        self.reset()

    @classmethod
    def from_machine(cls, m, **overrides) -> "SyntheticBackend":
        # peak arithmetic rate of the configured machine
        peak = m.clock_hz / 1e9 * m.flops_per_cycle * m.threads
        params = dict(flop_ns=1.0 / peak)
        params.update(overrides)
        return cls(m.cache, **params)

    def reset(self):
        self.lru = LruCache(self.cache.capacity_lines)
        self.last_hits = 0
        self.last_misses = 0
        self.last_lines: list = []

    def _lines(self, r: MemoryRegion, env, s: SizeModel) -> list:
        offs = region_offset_array(r, s, env, self.cache.line_elements)
        lines = offs // self.cache.line_elements
        _, first = np.unique(lines, return_index=True)
        return [(r.tensor.name, int(x)) for x in lines[np.sort(first)]]

    def touch(self, r, env, ws):
        for key in self._lines(r, env, ws.s):
            self.lru.access(key)

    def touch_remote(self, n_elements, ws):
        self.lru.touch_fresh(-(-n_elements // self.cache.line_elements))

    def execute(self, call, env, ws):
        order = list(call.inputs) + [call.output]
        hits = misses = 0
        lines = []
        for r in order:
            for key in self._lines(r, env, ws.s):
                lines.append(key)
                if self.lru.access(key):
                    hits += 1
                else:
                    misses += 1
        self.last_hits, self.last_misses, self.last_lines = hits, misses, lines
        return (self.call_ns + self.hit_ns * hits + self.miss_ns * misses
                + self.flop_ns * kernel_flops(call, ws.s))


def make_backend(name: str, machine=None, **kwargs) -> KernelBackend:
    if name == "reference":
        return ReferenceBackend()
    if name == "native":
        return NativeBackend(threads=machine.threads if machine else 1, **kwargs)
    if name == "synthetic":
        if machine is not None:
            return SyntheticBackend.from_machine(machine, **kwargs)
        return SyntheticBackend(**kwargs)
    raise BackendError(f"unknown backend {name!r} (choose native, reference or synthetic)")


# -- full execution ----------------------------------------------------------


def algorithm_tensors(a: Algorithm) -> list:
    """C, A, B, then the temporaries by name: a fixed order, so a seed gives
    the same inputs to every algorithm of a contraction."""
    temps = {}
    for node in _calls(a.tree):
        for r in node.operands:
            if r.tensor.role == "temporary":
                temps.setdefault(r.tensor.name, r.tensor)
    return list(a.contraction.tensors) + [temps[n] for n in sorted(temps)]


def _calls(nodes):
    for node in nodes:
        if isinstance(node, Loop):
            yield from _calls(node.body)
        else:
            yield node


class ExecutionAborted(RuntimeError):
    def __init__(self, elapsed_ns: int, done: int):
        super().__init__(f"execution aborted after {elapsed_ns / 1e9:.2f} s ({done} calls)")
        self.elapsed_ns = elapsed_ns
        self.done = done


def execute_algorithm(a: Algorithm, ws: Workspace, backend: KernelBackend,
                      deadline_ns: int | None = None, clock=None) -> int:
    """Run every call of ``a`` in program order; returns the number of calls.

    With ``deadline_ns`` (a ``clock()`` value), raises ExecutionAborted once
    it is passed; the check runs every call.
    """
    import time

    clock = clock or time.perf_counter_ns
    s = ws.s
    env: dict[str, int] = {}
    done = 0
    start = clock()

    def rec(nodes):
        nonlocal done
        for node in nodes:
            if isinstance(node, Loop):
                for v in range(s[node.index]):
                    env[node.index] = v
                    rec(node.body)
                del env[node.index]
            else:
                backend.execute(node, env, ws)
                done += 1
                if deadline_ns is not None and clock() > deadline_ns:
                    raise ExecutionAborted(clock() - start, done)

    rec(a.tree)
    return done


def run_algorithm(a: Algorithm, s: SizeModel, backend: KernelBackend | None = None,
                  seed: int = 0) -> Workspace:
    """Execute ``a`` on fresh random inputs (output starts at zero)."""
    backend = backend or ReferenceBackend()
    c = a.contraction
    ws = Workspace.full(algorithm_tensors(a), s, seed)
    ws.array(c.C.name)[:] = 0.0
    execute_algorithm(a, ws, backend)
    return ws
