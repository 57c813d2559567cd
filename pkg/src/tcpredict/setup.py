"""Setup lists: the memory accesses replayed before a timed kernel call."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .analysis import CacheConfig, OperandAnalysis
from .contraction import Full, MemoryRegion, SizeModel, region_size


class SetupError(RuntimeError):
    pass


@dataclass(frozen=True)
class SetupAction:
    kind: str  # "operand" | "remote" | "prefetch"
    size: int  # elements
    region: MemoryRegion | None = None
    distance: int | None = None  # target distance for operand/prefetch touches

    def __str__(self):
        if self.kind == "remote":
            return f"[{self.size}]"
        return str(self.region)


def touch_operand(region: MemoryRegion, size: int, distance: int | None = None) -> SetupAction:
    return SetupAction("operand", size, region, distance)


def touch_remote(size: int) -> SetupAction:
    return SetupAction("remote", size)


def touch_prefetch_line(region: MemoryRegion, size: int, distance: int | None = None) -> SetupAction:
    return SetupAction("prefetch", size, region, distance)


@dataclass(frozen=True)
class SetupList:
    actions: tuple[SetupAction, ...]
    truncated: bool = False
    omitted: bool = False
    limit: int = 0

    def __str__(self):
        return ", ".join(str(a) for a in self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)


def truncation_limit(cache: CacheConfig) -> int:
    return (5 * cache.capacity_elements) // 4


def _covers(outer: MemoryRegion, inner: MemoryRegion) -> bool:
    if outer.tensor != inner.tensor:
        return False
    return all(isinstance(o, Full) or o == i for o, i in zip(outer.selectors, inner.selectors))


def _overlap_allowance(members: Sequence[OperandAnalysis], nxt: Sequence[SetupAction]) -> int:
    """Elements of ``nxt`` already counted inside a joined region of the
    earlier operands' distance; the two distances may overlap by that much."""
    joined = [r for oa in members for r in oa.M]
    return sum(a.size for a in nxt if any(_covers(r, a.region) for r in joined))


def build_setup(ops: Sequence[OperandAnalysis], cache: CacheConfig, s: SizeModel) -> SetupList:
    """Order operand touches by distance (largest first) and fill the gaps
    with remote accesses, so that everything after an operand touch adds up
    to its distance.  Operands with equal distance form one group touched
    back to back; the identity then counts only what follows the group.

    Joined regions may contain a later operand that is itself counted again
    in its own, shorter distance.  The filler is then clamped to zero; any
    deficit not explained that way raises ``SetupError``.
    """
    entries = []
    for oa in ops:
        if oa.prefetched:
            size = region_size(oa.prefetch_region, s, cache.line_elements)
            entries.append((oa.prefetch_distance, oa.slot, oa,
                            touch_prefetch_line(oa.prefetch_region, size, oa.prefetch_distance)))
        else:
            size = region_size(oa.operand, s)
            entries.append((oa.access_distance, oa.slot, oa,
                            touch_operand(oa.operand, size, oa.access_distance)))

    # cold operands are never touched: they are flushed by the truncation
    cold = any(e[0] is None for e in entries)
    entries = sorted((e for e in entries if e[0] is not None), key=lambda e: (-e[0], e[1]))

    groups: list[list] = []
    for dist, _, oa, action in entries:
        if groups and groups[-1][0] == dist:
            groups[-1][1].append(action)
            groups[-1][2].append(oa)
        else:
            groups.append([dist, [action], [oa]])

    actions: list[SetupAction] = []
    for n, (dist, members, analyses) in enumerate(groups):
        actions.extend(members)
        if n + 1 < len(groups):
            nxt_dist, nxt, _ = groups[n + 1]
            filler = dist - nxt_dist - sum(a.size for a in nxt)
            if 0 < -filler <= _overlap_allowance(analyses, nxt):
                filler = 0
        else:
            filler = dist
        if filler < 0:
            raise SetupError(
                f"negative filler {filler} after {members[0]}: distances are inconsistent")
        if filler:
            actions.append(touch_remote(filler))

    limit = truncation_limit(cache)
    total = sum(a.size for a in actions)
    truncated = cold or total > limit
    if truncated:
        while actions and total > limit:
            total -= actions.pop(0).size
        if limit - total > 0:
            actions.insert(0, touch_remote(limit - total))
    omitted = bool(actions) and all(a.kind != "remote" for a in actions)
    return SetupList(tuple(actions), truncated, omitted, limit)


def setup_total(sl: SetupList) -> int:
    return sum(a.size for a in sl.actions)


def suffix_distances(sl: SetupList) -> list[tuple[SetupAction, int]]:
    """For each operand/prefetch touch, the elements accessed after it,
    excluding touches of the same distance group."""
    out = []
    for p, act in enumerate(sl.actions):
        if act.kind == "remote":
            continue
        after = sum(a.size for a in sl.actions[p + 1:]
                    if a.kind == "remote" or a.distance != act.distance)
        out.append((act, after))
    return out
