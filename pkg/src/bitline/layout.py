"""Cache-line geometry and the branch lookup table.

Branch leakage is judged against cache layouts: a conditional jump only
leaks if its two branch bodies occupy distinguishable sets of cache lines
(at least one non-overlapping line).  The branch table maps each
conditional-jump address to the address ranges of its taken/fall-through
bodies, optionally with a shared trailing range both paths execute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


class LayoutError(Exception):
    pass


@dataclass(frozen=True)
class CacheGeometry:
    """Line-size model: a cache line holds 2**line_bits bytes."""

    line_bits: int = 6

    def __post_init__(self):
        if not 4 <= self.line_bits <= 12:
            raise LayoutError(f"cache line bits must be in [4, 12], got {self.line_bits}")


def cache_line(addr: int, g: CacheGeometry) -> int:
    """Line index of a byte address (address right-shifted by the line bits)."""
    return addr >> g.line_bits


def lines_of_range(start: int, end: int, g: CacheGeometry) -> set:
    """Line indices covered by the half-open byte range ``[start, end)``."""
    if start > end:
        raise LayoutError(f"bad range [{start:#x}, {end:#x})")
    if start == end:
        return set()
    return set(range(start >> g.line_bits, ((end - 1) >> g.line_bits) + 1))


@dataclass(frozen=True)
class BranchEntry:
    """Branch bodies of one conditional jump.

    The fall-through body occupies ``[a, b)`` and the jump-target body
    ``[b, c)`` (empty when ``b == c``).  ``extra_common`` is an address
    range executed by both paths afterwards, e.g. the shared tail after a
    switch.
    """

    cond_addr: int
    a: int
    b: int
    c: int
    extra_common: Optional[tuple] = None  # (start, end)

    def __post_init__(self):
        if not self.a < self.b <= self.c:
            raise LayoutError(
                f"branch at {self.cond_addr:#x}: need a < b <= c, "
                f"got {self.a:#x}, {self.b:#x}, {self.c:#x}"
            )


def distinguishable(e: BranchEntry, g: CacheGeometry) -> bool:
    """True when the two branch bodies cover different cache-line sets."""
    common = set()
    if e.extra_common is not None:
        common = lines_of_range(e.extra_common[0], e.extra_common[1], g)
    l_if = lines_of_range(e.a, e.b, g) | common
    l_else = lines_of_range(e.b, e.c, g) | common
    return l_if != l_else


def branch_lines(e: BranchEntry, g: CacheGeometry) -> tuple:
    """(if-body lines, else-body lines), each including the common range."""
    common = set()
    if e.extra_common is not None:
        common = lines_of_range(e.extra_common[0], e.extra_common[1], g)
    return lines_of_range(e.a, e.b, g) | common, lines_of_range(e.b, e.c, g) | common


@dataclass
class BranchTable:
    entries: dict = field(default_factory=dict)  # cond_addr -> BranchEntry

    def get(self, cond_addr: int):
        return self.entries.get(cond_addr)

    def add(self, entry: BranchEntry) -> None:
        if entry.cond_addr in self.entries:
            raise LayoutError(f"duplicate branch entry for {entry.cond_addr:#x}")
        self.entries[entry.cond_addr] = entry

    def __len__(self):
        return len(self.entries)


def parse_branch_table(text: str) -> BranchTable:
    """Parse ``BC 0x<cond> 0x<a> 0x<b> 0x<c> [COMMON 0x<s> 0x<e>]`` lines.

    ``#`` starts a comment; blank lines are ignored.
    """
    table = BranchTable()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "BC":
            raise LayoutError(f"line {lineno}: expected 'BC', got {parts[0]!r}")
        try:
            if len(parts) == 5:
                cond, a, b, c = (int(p, 16) for p in parts[1:5])
                extra = None
            elif len(parts) == 8 and parts[5] == "COMMON":
                cond, a, b, c = (int(p, 16) for p in parts[1:5])
                extra = (int(parts[6], 16), int(parts[7], 16))
            else:
                raise ValueError("wrong field count")
        except ValueError as exc:
            raise LayoutError(f"line {lineno}: malformed branch entry ({exc})") from exc
        try:
            table.add(BranchEntry(cond, a, b, c, extra))
        except LayoutError as exc:
            raise LayoutError(f"line {lineno}: {exc}") from exc
    return table


def serialize_branch_table(table: BranchTable) -> str:
    out = []
    for e in sorted(table.entries.values(), key=lambda e: e.cond_addr):
        line = f"BC {e.cond_addr:#x} {e.a:#x} {e.b:#x} {e.c:#x}"
        if e.extra_common is not None:
            line += f" COMMON {e.extra_common[0]:#x} {e.extra_common[1]:#x}"
        out.append(line)
    return "\n".join(out) + ("\n" if out else "")
