"""Contractions, tensors and symbolic memory regions.

Tensors are stored Fortran-style: the first listed dimension is contiguous.
All sizes here are in elements; bytes only appear at cache boundaries.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping


class ContractionError(ValueError):
    """Raised for malformed or unsupported contraction statements."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


ROLES = ("outputC", "inputA", "inputB", "temporary")


@dataclass(frozen=True)
class Index:
    name: str
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"index {self.name!r} must have size >= 1, got {self.size}")


@dataclass(frozen=True)
class Tensor:
    name: str
    dims: tuple[str, ...]
    role: str = "temporary"

    def __post_init__(self):
        if len(set(self.dims)) != len(self.dims):
            raise ContractionError(f"trace unsupported: tensor {self.name} repeats an index")
        if self.role not in ROLES:
            raise ValueError(f"unknown tensor role {self.role!r}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def full(self) -> "MemoryRegion":
        return MemoryRegion(self, tuple(FULL for _ in self.dims))

    def __str__(self):
        return f"{self.name}[{','.join(self.dims)}]"


# -- selectors ---------------------------------------------------------------


@dataclass(frozen=True)
class Full:
    def __str__(self):
        return ":"


@dataclass(frozen=True)
class Bound:
    index: str

    def __str__(self):
        return self.index


@dataclass(frozen=True)
class FirstLine:
    """One cache line along the first dimension (prefetch emulation only)."""

    index: str

    def __str__(self):
        return f"<{self.index}>"


FULL = Full()
Selector = Full | Bound | FirstLine


@dataclass(frozen=True)
class MemoryRegion:
    tensor: Tensor
    selectors: tuple

    def __post_init__(self):
        if len(self.selectors) != self.tensor.ndim:
            raise ValueError(
                f"{self.tensor.name}: {len(self.selectors)} selectors for "
                f"{self.tensor.ndim} dimensions"
            )
        for pos, sel in enumerate(self.selectors):
            if isinstance(sel, FirstLine) and pos != 0:
                raise ValueError("FirstLine may only select the first dimension")

    @property
    def bound_indices(self) -> tuple[str, ...]:
        return tuple(s.index for s in self.selectors if isinstance(s, Bound))

    @property
    def kept_dims(self) -> tuple[str, ...]:
        """Indices of the dimensions not fixed by a loop, in storage order."""
        return tuple(
            d for d, s in zip(self.tensor.dims, self.selectors) if not isinstance(s, Bound)
        )

    def depends_on(self, index: str) -> bool:
        return index in self.bound_indices

    def __str__(self):
        return f"{self.tensor.name}[{','.join(str(s) for s in self.selectors)}]"

    __repr__ = __str__


@dataclass(frozen=True)
class SizeModel:
    assignment: Mapping[str, int]
    element_bytes: int = 8

    def __post_init__(self):
        if self.element_bytes <= 0:
            raise ValueError("element_bytes must be positive")
        for name, size in self.assignment.items():
            if int(size) < 1:
                raise ValueError(f"index {name!r} must have size >= 1, got {size}")
        object.__setattr__(self, "assignment", dict(self.assignment))

    def __getitem__(self, index: str) -> int:
        return self.assignment[index]

    def covers(self, contraction: "Contraction") -> bool:
        return all(i in self.assignment for i in contraction.indices)

    def indices(self) -> list[Index]:
        return [Index(n, s) for n, s in self.assignment.items()]


@dataclass(frozen=True)
class Contraction:
    C: Tensor
    A: Tensor
    B: Tensor
    contracted: tuple[str, ...] = field(default=())
    freeA: tuple[str, ...] = field(default=())
    freeB: tuple[str, ...] = field(default=())

    @classmethod
    def from_tensors(cls, C: Tensor, A: Tensor, B: Tensor) -> "Contraction":
        a, b, c = set(A.dims), set(B.dims), set(C.dims)
        for idx in C.dims:
            if idx not in a and idx not in b:
                raise ContractionError(f"unbound output index {idx!r}")
        contracted = tuple(i for i in A.dims if i in b)
        for i in contracted:
            if i in c:
                raise ContractionError(f"index {i!r} appears in A, B and C (batch indices unsupported)")
        for i in (a ^ b) - c:
            raise ContractionError(f"dangling index {i!r}: appears in one input but not in the output")
        freeA = tuple(i for i in A.dims if i not in b)
        freeB = tuple(i for i in B.dims if i not in a)
        return cls(C, A, B, contracted, freeA, freeB)

    @property
    def indices(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in (self.C, self.A, self.B):
            for d in t.dims:
                seen.setdefault(d)
        return tuple(seen)

    @property
    def tensors(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.C, self.A, self.B)

    def __str__(self):
        return f"{self.C} = {self.A} * {self.B}"


# -- parsing -----------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[\[\],=*]))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            pos += len(text[pos:]) - len(text[pos:].lstrip())
            raise ContractionError(f"unexpected character {text[pos]!r}", pos)
        value = m.group("ident") or m.group("punct")
        tokens.append((value, m.start(m.lastgroup)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def where(self) -> int:
        return self.tokens[self.pos][1] if self.pos < len(self.tokens) else len(self.text)

    def expect(self, value: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise ContractionError(f"unexpected end of input, expected {value or 'identifier'}", self.where())
        if value is None:
            if not re.match(r"[A-Za-z_]", tok):
                raise ContractionError(f"expected identifier, got {tok!r}", self.where())
        elif tok != value:
            raise ContractionError(f"expected {value!r}, got {tok!r}", self.where())
        self.pos += 1
        return tok

    def tensor(self, role: str) -> Tensor:
        name = self.expect()
        self.expect("[")
        dims = [self.expect()]
        while self.peek() == ",":
            self.pos += 1
            dims.append(self.expect())
        self.expect("]")
        return Tensor(name, tuple(dims), role)

    def statement(self) -> Contraction:
        C = self.tensor("outputC")
        self.expect("=")
        A = self.tensor("inputA")
        if self.peek() == "*":
            self.pos += 1
        B = self.tensor("inputB")
        if self.peek() is not None:
            raise ContractionError(f"trailing input {self.peek()!r}", self.where())
        if len({C.name, A.name, B.name}) != 3:
            raise ContractionError("tensor names must be distinct")
        return Contraction.from_tensors(C, A, B)


def parse_contraction(text: str) -> Contraction:
    """Parse ``C[a,b,c] = A[a,i] * B[i,b,c]`` (the ``*`` is optional)."""
    return _Parser(text).statement()


def format_contraction(c: Contraction) -> str:
    return str(c)


def parse_sizes(text: str | Iterable[str]) -> dict[str, int]:
    """Parse ``a=400,b=400,i=8`` (or an iterable of ``name=value`` items)."""
    items = text.replace(";", ",").split(",") if isinstance(text, str) else list(text)
    sizes = {}
    for item in items:
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"size assignment {item!r} is not of the form name=value")
        sizes[name.strip()] = int(value)
    return sizes


# -- region arithmetic -------------------------------------------------------


def region_size(r: MemoryRegion, s: SizeModel, line_elements: int | None = None) -> int:
    """Element count of a region; FirstLine needs ``line_elements``."""
    total = 1
    for dim, sel in zip(r.tensor.dims, r.selectors):
        if isinstance(sel, Bound):
            continue
        if isinstance(sel, FirstLine):
            if line_elements is None:
                raise ValueError("FirstLine sizing requires line_elements")
            total *= min(line_elements, s[dim])
        else:
            total *= s[dim]
    return total


def join_region(r: MemoryRegion, index: str) -> MemoryRegion:
    if index not in r.bound_indices:
        return r
    sels = tuple(FULL if isinstance(s, Bound) and s.index == index else s for s in r.selectors)
    return MemoryRegion(r.tensor, sels)


def join_all(r: MemoryRegion, indices: Iterable[str]) -> MemoryRegion:
    for idx in indices:
        r = join_region(r, idx)
    return r


def regions_total_size(M: Iterable[MemoryRegion], s: SizeModel) -> int:
    # overlapping regions are summed as-is
    return sum(region_size(r, s) for r in M)


def strides(t: Tensor, s: SizeModel) -> tuple[int, ...]:
    out, acc = [], 1
    for d in t.dims:
        out.append(acc)
        acc *= s[d]
    return tuple(out)


def tensor_elements(t: Tensor, s: SizeModel) -> int:
    return math.prod(s[d] for d in t.dims)


def region_offsets(r: MemoryRegion, s: SizeModel, env: Mapping[str, int],
                   line_elements: int | None = None) -> list[int]:
    """Flat element offsets of a region, in column-major order."""
    st = strides(r.tensor, s)
    base = 0
    ranges = []
    for dim, sel, stride in zip(r.tensor.dims, r.selectors, st):
        if isinstance(sel, Bound):
            base += env[sel.index] * stride
        elif isinstance(sel, FirstLine):
            ranges.append((min(line_elements or 1, s[dim]), stride))
        else:
            ranges.append((s[dim], stride))
    offsets = [base]
    for extent, stride in ranges:
        offsets = [o + k * stride for k in range(extent) for o in offsets]
    return offsets


def region_offset_array(r: MemoryRegion, s: SizeModel, env: Mapping[str, int],
                        line_elements: int | None = None):
    """``region_offsets`` as a numpy array (same order), for large regions."""
    import numpy as np

    st = strides(r.tensor, s)
    base = 0
    offsets = np.zeros(1, dtype=np.int64)
    for dim, sel, stride in zip(r.tensor.dims, r.selectors, st):
        if isinstance(sel, Bound):
            base += env[sel.index] * stride
            continue
        extent = min(line_elements or 1, s[dim]) if isinstance(sel, FirstLine) else s[dim]
        offsets = (offsets[None, :] + stride * np.arange(extent, dtype=np.int64)[:, None]).ravel()
    return offsets + base
