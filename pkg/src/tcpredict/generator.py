"""BLAS-based algorithm generation for two-tensor contractions.

Each algorithm is a loop nest over the sliced indices around exactly one
BLAS call (dot, axpy, gemv, ger or gemm), plus any copy calls needed to give
matrix operands a contiguous dimension.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .contraction import (
    FULL,
    Bound,
    Contraction,
    MemoryRegion,
    SizeModel,
    Tensor,
    strides,
)

KERNELS = ("dot", "axpy", "gemv", "ger", "gemm")
KERNEL_KINDS = KERNELS + ("copy",)

# (number of kept inputs dims of A-side, B-side, output) per kernel
_OPERAND_DIMS = {
    "dot": ((1, 1), 0),
    "axpy": ((1, 0), 1),
    "gemv": ((2, 1), 1),
    "ger": ((1, 1), 2),
    "gemm": ((2, 2), 2),
}


@dataclass(frozen=True)
class KernelCall:
    """One BLAS call.

    ``inputs`` keep tensor order (A-side first).  ``trans`` holds one flag per
    input: for matrix inputs it says whether the operand enters the BLAS call
    transposed relative to its storage; vectors and scalars carry False.
    """

    kind: str
    output: MemoryRegion
    inputs: tuple[MemoryRegion, ...]
    trans: tuple[bool, ...] = ()

    @property
    def operands(self) -> tuple[MemoryRegion, ...]:
        return (self.output,) + self.inputs

    def __str__(self):
        return f"{self.kind}({self.output} <- {', '.join(map(str, self.inputs))})"


@dataclass(frozen=True)
class Loop:
    index: str
    body: tuple = ()


@dataclass(frozen=True)
class Algorithm:
    name: str
    kernel: str
    sliced: tuple[str, ...]
    tree: tuple  # children of the root: Loop | KernelCall
    copy_count: int = 0
    contraction: Contraction | None = field(default=None, compare=False, repr=False)

    @property
    def main_call(self) -> KernelCall:
        for call, _ in walk_calls(self.tree):
            if call.kind != "copy":
                return call
        raise ValueError(f"algorithm {self.name} has no compute kernel")

    @property
    def copies(self) -> list[KernelCall]:
        return [c for c, _ in walk_calls(self.tree) if c.kind == "copy"]


def walk_calls(nodes: Sequence, loops: tuple[str, ...] = ()) -> Iterator[tuple[KernelCall, tuple[str, ...]]]:
    """Yield (call, enclosing loop indices outermost first) in program order."""
    for node in nodes:
        if isinstance(node, Loop):
            yield from walk_calls(node.body, loops + (node.index,))
        else:
            yield node, loops


# -- slicing -----------------------------------------------------------------


def enumerate_slicings(c: Contraction) -> list[tuple[str, tuple[str, ...], frozenset[str]]]:
    """All (kernel, kept indices, sliced index set) choices allowed by the
    kernel's index requirements, in BLAS-level order."""
    out = []
    all_idx = set(c.indices)

    def add(kind, kept):
        out.append((kind, tuple(kept), frozenset(all_idx - set(kept))))

    for k in c.contracted:
        add("dot", (k,))
    for f in c.freeA + c.freeB:
        add("axpy", (f,))
    for k in c.contracted:
        for f in c.freeA + c.freeB:
            add("gemv", (k, f))
    for fa in c.freeA:
        for fb in c.freeB:
            add("ger", (fa, fb))
    for k in c.contracted:
        for fa in c.freeA:
            for fb in c.freeB:
                add("gemm", (k, fa, fb))
    return out


def _slice(t: Tensor, sliced: frozenset[str]) -> MemoryRegion:
    return MemoryRegion(t, tuple(Bound(d) if d in sliced else FULL for d in t.dims))


def is_contiguous(r: MemoryRegion) -> bool:
    """A matrix slice has a unit-stride dimension iff the tensor's first
    dimension is kept (Fortran order)."""
    return not isinstance(r.selectors[0], Bound)


def _orient(kind: str, out: MemoryRegion, a: MemoryRegion, b: MemoryRegion) -> tuple[bool, bool]:
    """Transpose flags for the two inputs (storage rows = first kept dim)."""
    if kind == "gemv":
        mat, is_a = (a, True) if len(a.kept_dims) == 2 else (b, False)
        t = mat.kept_dims[0] != out.kept_dims[0]
        return (t, False) if is_a else (False, t)
    if kind == "gemm":
        row, col = out.kept_dims
        first, second = (a, b) if row in a.kept_dims else (b, a)
        k = next(d for d in first.kept_dims if d != row)
        t_first = first.kept_dims[0] != row
        t_second = second.kept_dims[0] != k
        return (t_first, t_second) if first is a else (t_second, t_first)
    return (False, False)


def insert_copies(call: KernelCall) -> tuple[list[KernelCall], KernelCall, list[KernelCall]]:
    """Replace non-contiguous matrix operands by temporaries.

    Returns (copies before, rewritten call, copies after).  Calls that are
    already contiguous come back unchanged with no copies.
    """
    if call.kind not in ("gemv", "ger", "gemm"):
        return [], call, []
    before, after = [], []
    inputs = list(call.inputs)
    for n, r in enumerate(inputs):
        if len(r.kept_dims) == 2 and not is_contiguous(r):
            tmp = Tensor(r.tensor.name + "~", r.kept_dims, "temporary")
            before.append(KernelCall("copy", tmp.full(), (r,)))
            inputs[n] = tmp.full()
    out = call.output
    if len(out.kept_dims) == 2 and not is_contiguous(out):
        tmp = Tensor(out.tensor.name + "~", out.kept_dims, "temporary")
        before.append(KernelCall("copy", tmp.full(), (out,)))
        after.append(KernelCall("copy", out, (tmp.full(),)))
        out = tmp.full()
    trans = _orient(call.kind, out, inputs[0], inputs[1])
    return before, KernelCall(call.kind, out, tuple(inputs), trans), after


def _copy_level(copy: KernelCall, order: tuple[str, ...]) -> int:
    """Depth (number of enclosing loops) at which a copy is hoisted."""
    region = copy.inputs[0] if copy.output.tensor.role == "temporary" else copy.output
    deps = set(region.bound_indices)
    return max((n + 1 for n, idx in enumerate(order) if idx in deps), default=0)


def _build_tree(order, before, main, after) -> tuple:
    levels = len(order)

    def body(depth: int) -> tuple:
        pre = tuple(c for c in before if _copy_level(c, order) == depth)
        post = tuple(c for c in after if _copy_level(c, order) == depth)
        inner = (main,) if depth == levels else (Loop(order[depth], body(depth + 1)),)
        return pre + inner + post

    return body(0)


def _name(order, copies, kernel) -> str:
    marks = [0] * (len(order) + 1)
    for c in copies:
        marks[_copy_level(c, order)] += 1
    prefix = "'" * marks[0]
    loops = "".join(idx + "'" * marks[n + 1] for n, idx in enumerate(order))
    return f"{prefix}{loops}_{kernel}"


def generate_algorithms(c: Contraction, kernels: Sequence[str] = KERNELS) -> list[Algorithm]:
    """Every (kernel, slicing, loop order) algorithm for ``c``.

    Ordered by kernel (BLAS level), then lexicographically by loop order.
    """
    algorithms = []
    for kind in KERNELS:
        if kind not in kernels:
            continue
        found = []
        for k, kept, sliced in enumerate_slicings(c):
            if k != kind:
                continue
            call = KernelCall(kind, _slice(c.C, sliced), (_slice(c.A, sliced), _slice(c.B, sliced)))
            before, main, after = insert_copies(call)
            for order in itertools.permutations(sorted(sliced)):
                tree = _build_tree(order, before, main, after)
                name = _name(order, before + after, kind)
                found.append(
                    Algorithm(name, kind, order, tree, len(before) + len(after), c)
                )
        found.sort(key=lambda a: a.sliced)
        algorithms.extend(found)
    return algorithms


def invocation_count(a: Algorithm, s: SizeModel) -> int:
    for call, loops in walk_calls(a.tree):
        if call.kind != "copy":
            return math.prod(s[i] for i in loops)
    raise ValueError("no compute kernel")


def call_counts(a: Algorithm, s: SizeModel) -> list[tuple[KernelCall, int]]:
    return [(call, math.prod(s[i] for i in loops)) for call, loops in walk_calls(a.tree)]


# -- code emission -----------------------------------------------------------


def _pseudo_call(call: KernelCall) -> str:
    if call.kind == "copy":
        return f"{call.output} := {call.inputs[0]}"
    return f"{call.output} += {' '.join(str(r) for r in call.inputs)}"


def emit_pseudo(a: Algorithm) -> str:
    lines = []

    def rec(nodes, depth):
        pad = "    " * depth
        for node in nodes:
            if isinstance(node, Loop):
                lines.append(f"{pad}for {node.index} = 1:{node.index}")
                rec(node.body, depth + 1)
            else:
                lines.append(f"{pad}{_pseudo_call(node)} ({node.kind})")

    rec(a.tree, 0)
    return "\n".join(lines)


def _region_json(r: MemoryRegion) -> dict:
    return {
        "tensor": r.tensor.name,
        "dims": list(r.tensor.dims),
        "role": r.tensor.role,
        "selectors": [str(s) for s in r.selectors],
    }


def to_ast(a: Algorithm) -> dict:
    """JSON-serialisable tree: loop nodes carry ``index`` and ``children``,
    call nodes carry ``kernel``, ``output``, ``inputs`` and ``trans``."""

    def node(n):
        if isinstance(n, Loop):
            return {"kind": "loop", "index": n.index, "children": [node(c) for c in n.body]}
        return {
            "kind": "call",
            "kernel": n.kind,
            "output": _region_json(n.output),
            "inputs": [_region_json(r) for r in n.inputs],
            "trans": list(n.trans),
        }

    return {"name": a.name, "kernel": a.kernel, "copies": a.copy_count,
            "root": {"kind": "root", "children": [node(c) for c in a.tree]}}


def emit_ast_json(a: Algorithm) -> str:
    return json.dumps(to_ast(a), indent=2)


def _c_name(t: Tensor) -> str:
    return t.name.replace("~", "_t")


def _c_ptr(r: MemoryRegion) -> str:
    terms = []
    acc = []
    for dim, sel in zip(r.tensor.dims, r.selectors):
        if isinstance(sel, Bound):
            terms.append("*".join([sel.index] + acc) if acc else sel.index)
        acc.append(f"N_{dim}")
    off = " + ".join(terms)
    return f"{_c_name(r.tensor)}" + (f" + {off}" if off else "")


def _c_stride(r: MemoryRegion, dim: str) -> str:
    pos = r.tensor.dims.index(dim)
    return "*".join(f"N_{d}" for d in r.tensor.dims[:pos]) or "1"


def _c_call(call: KernelCall) -> str:
    out = call.output
    if call.kind == "copy":
        src = call.inputs[0]
        if len(src.kept_dims) == 2:
            r, c = src.kept_dims
            return (f"for (int q = 0; q < N_{c}; ++q) cblas_dcopy(N_{r}, "
                    f"{_c_ptr(src)} + q*{_c_stride(src, c)}, {_c_stride(src, r)}, "
                    f"{_c_ptr(out)} + q*{_c_stride(out, c)}, {_c_stride(out, r)});")
        (d,) = src.kept_dims
        return f"cblas_dcopy(N_{d}, {_c_ptr(src)}, {_c_stride(src, d)}, {_c_ptr(out)}, {_c_stride(out, d)});"
    a, b = call.inputs
    if call.kind == "dot":
        (k,) = a.kept_dims
        return (f"{_c_ptr(out)}[0] += cblas_ddot(N_{k}, {_c_ptr(a)}, {_c_stride(a, k)}, "
                f"{_c_ptr(b)}, {_c_stride(b, k)});")
    if call.kind == "axpy":
        x, alpha = (a, b) if a.kept_dims else (b, a)
        (f,) = x.kept_dims
        return (f"cblas_daxpy(N_{f}, {_c_ptr(alpha)}[0], {_c_ptr(x)}, {_c_stride(x, f)}, "
                f"{_c_ptr(out)}, {_c_stride(out, f)});")
    if call.kind == "gemv":
        mat, vec, t = (a, b, call.trans[0]) if len(a.kept_dims) == 2 else (b, a, call.trans[1])
        r, c = mat.kept_dims
        (k,) = vec.kept_dims
        (y,) = out.kept_dims
        return (f"cblas_dgemv(CblasColMajor, {'CblasTrans' if t else 'CblasNoTrans'}, N_{r}, N_{c}, 1.0, "
                f"{_c_ptr(mat)}, {_c_stride(mat, c)}, {_c_ptr(vec)}, {_c_stride(vec, k)}, 1.0, "
                f"{_c_ptr(out)}, {_c_stride(out, y)});")
    if call.kind == "ger":
        r, c = out.kept_dims
        x, y = (a, b) if r in a.kept_dims else (b, a)
        return (f"cblas_dger(CblasColMajor, N_{r}, N_{c}, 1.0, {_c_ptr(x)}, {_c_stride(x, r)}, "
                f"{_c_ptr(y)}, {_c_stride(y, c)}, {_c_ptr(out)}, {_c_stride(out, c)});")
    # gemm
    r, c = out.kept_dims
    first, second = (a, b) if r in a.kept_dims else (b, a)
    tf, ts = call.trans if first is a else call.trans[::-1]
    k = next(d for d in first.kept_dims if d != r)
    return (f"cblas_dgemm(CblasColMajor, {'CblasTrans' if tf else 'CblasNoTrans'}, "
            f"{'CblasTrans' if ts else 'CblasNoTrans'}, N_{r}, N_{c}, N_{k}, 1.0, "
            f"{_c_ptr(first)}, {_c_stride(first, first.kept_dims[1])}, "
            f"{_c_ptr(second)}, {_c_stride(second, second.kept_dims[1])}, 1.0, "
            f"{_c_ptr(out)}, {_c_stride(out, c)});")


def emit_c(a: Algorithm) -> str:
    c = a.contraction
    lines = [f"/* {a.name}: {c} */", "#include <cblas.h>", ""]
    temps = sorted({r.tensor for call, _ in walk_calls(a.tree) for r in call.operands
                    if r.tensor.role == "temporary"}, key=lambda t: t.name)
    sizes = ", ".join(f"int N_{i}" for i in c.indices)
    lines.append(f"void {a.name.replace(chr(39), 'p')}({sizes}, "
                 f"double *{c.C.name}, const double *{c.A.name}, const double *{c.B.name}, "
                 "double *work)")
    lines.append("{")
    off = "0"
    for t in temps:
        lines.append(f"    double *{_c_name(t)} = work + {off};")
        off = f"{off} + " + "*".join(f"N_{d}" for d in t.dims)

    def rec(nodes, depth):
        pad = "    " * depth
        for node in nodes:
            if isinstance(node, Loop):
                lines.append(f"{pad}for (int {node.index} = 0; {node.index} < N_{node.index}; ++{node.index}) {{")
                rec(node.body, depth + 1)
                lines.append(f"{pad}}}")
            else:
                lines.append(pad + _c_call(node))

    rec(a.tree, 1)
    lines.append("}")
    return "\n".join(lines)


def emit_code(a: Algorithm, style: str = "pseudo") -> str:
    if style == "pseudo":
        return emit_pseudo(a)
    if style == "c":
        return emit_c(a)
    if style in ("ast-json", "json"):
        return emit_ast_json(a)
    raise ValueError(f"unknown emit style {style!r}")


def find_algorithm(algorithms: Sequence[Algorithm], name: str) -> Algorithm:
    for a in algorithms:
        if a.name == name:
            return a
    raise KeyError(f"no algorithm named {name!r}")


def offset_of(r: MemoryRegion, s: SizeModel, env) -> int:
    st = strides(r.tensor, s)
    return sum(env[sel.index] * stride for sel, stride in zip(r.selectors, st) if isinstance(sel, Bound))
