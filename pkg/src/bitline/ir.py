"""Core value and statement representation for bit-level security typing.

Every machine value (register, CPU flag, memory byte) is modelled as an
ordered vector of refined bits.  A refined bit carries a security level from
the five-point chain

    CST <= URA <= WRA <= SID <= SDD

(constant, uniformly random, weakly random, secret-independent,
secret-dependent) and, optionally, a value predicate recording that the bit
is statically known to be 0 or 1.

``TypedBitvector`` stores the per-bit information as integer bitmasks (one
plane per security level plus known/value masks for the predicates) so that
whole-vector operations cost a handful of big-int instructions instead of a
Python-level loop; ``bits`` / ``bit()`` materialise ``RefinedBit`` views for
callers that want the per-bit picture.

All values here are immutable after construction.  ``TypeEnv`` is mutated in
place by a single sequential analysis pass; use ``copy()`` before sharing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional


class SecurityType(enum.IntEnum):
    """Security level of one bit; the lattice is the total order CST..SDD."""

    CST = 0
    URA = 1
    WRA = 2
    SID = 3
    SDD = 4

    @property
    def symbol(self) -> str:
        return _LEVEL_SYMBOLS[self]


_LEVEL_SYMBOLS = {
    SecurityType.CST: "C",
    SecurityType.URA: "U",
    SecurityType.WRA: "W",
    SecurityType.SID: "I",
    SecurityType.SDD: "K",
}

CST = SecurityType.CST
URA = SecurityType.URA
WRA = SecurityType.WRA
SID = SecurityType.SID
SDD = SecurityType.SDD


def join(a: SecurityType, b: SecurityType) -> SecurityType:
    """Least upper bound of two security levels (max on the chain)."""
    return a if a >= b else b


@dataclass(frozen=True)
class RefinedBit:
    """One bit: a security level plus an optional known value (0 or 1)."""

    sec: SecurityType
    value: Optional[int] = None

    def __post_init__(self):
        if self.value is not None and self.value not in (0, 1):
            raise ValueError("bit value predicate must be 0 or 1")


class TypedBitvector:
    """Ordered sequence of refined bits; index 0 is least significant.

    ``planes[level]`` holds the mask of bits at that security level (the five
    masks partition the width).  ``known`` marks bits carrying a value
    predicate and ``val`` holds those predicate values (``val`` is a subset
    of ``known``).
    """

    __slots__ = ("width", "planes", "known", "val")

    def __init__(self, width: int, planes: tuple, known: int, val: int):
        self.width = width
        self.planes = planes
        self.known = known
        self.val = val

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(value: int, width: int) -> "TypedBitvector":
        if width < 1:
            raise ValueError("width must be positive")
        if value < 0 or value >> width:
            raise ValueError(f"value {value:#x} does not fit in {width} bits")
        full = (1 << width) - 1
        return TypedBitvector(width, (full, 0, 0, 0, 0), full, value)

    @staticmethod
    def filled(level: SecurityType, width: int) -> "TypedBitvector":
        if width < 1:
            raise ValueError("width must be positive")
        full = (1 << width) - 1
        planes = [0, 0, 0, 0, 0]
        planes[level] = full
        return TypedBitvector(width, tuple(planes), 0, 0)

    @staticmethod
    def from_bits(bits: Iterable[RefinedBit]) -> "TypedBitvector":
        planes = [0, 0, 0, 0, 0]
        known = 0
        val = 0
        width = 0
        for i, b in enumerate(bits):
            planes[b.sec] |= 1 << i
            if b.value is not None:
                known |= 1 << i
                val |= b.value << i
            width = i + 1
        if width == 0:
            raise ValueError("empty bitvector")
        return TypedBitvector(width, tuple(planes), known, val)

    # -- per-bit views -----------------------------------------------------

    def bit(self, i: int) -> RefinedBit:
        if not 0 <= i < self.width:
            raise IndexError(i)
        m = 1 << i
        for lvl in (SDD, SID, WRA, URA, CST):
            if self.planes[lvl] & m:
                sec = lvl
                break
        value = (self.val >> i) & 1 if self.known & m else None
        return RefinedBit(sec, value)

    @property
    def bits(self) -> list:
        return [self.bit(i) for i in range(self.width)]

    # -- structural type ---------------------------------------------------

    def vector_type(self) -> SecurityType:
        p = self.planes
        if p[SDD]:
            return SDD
        if p[URA]:
            return URA
        if p[SID]:
            return SID
        if p[WRA]:
            return WRA
        return CST

    def level_of(self, i: int) -> SecurityType:
        m = 1 << i
        for lvl in (SDD, SID, WRA, URA, CST):
            if self.planes[lvl] & m:
                return lvl
        return CST

    # -- predicates --------------------------------------------------------

    def interval(self) -> tuple:
        """Unsigned [lo, hi] consistent with the value predicates."""
        full = (1 << self.width) - 1
        lo = self.val
        hi = self.val | (full & ~self.known)
        return lo, hi

    def is_fully_known(self) -> bool:
        return self.known == (1 << self.width) - 1

    def known_value(self) -> Optional[int]:
        return self.val if self.is_fully_known() else None

    # -- display -----------------------------------------------------------

    def display(self) -> str:
        """Render like ``{K}16{0}16:SDD`` (most significant bit first).

        Fully known constants render as their decimal value, e.g. ``24:CST``.
        """
        t = self.vector_type()
        if self.is_fully_known() and t is CST:
            return f"{self.val}:{t.name}"
        runs = []
        prev = None
        count = 0
        for i in range(self.width - 1, -1, -1):
            m = 1 << i
            if self.known & m:
                sym = "1" if self.val & m else "0"
            else:
                sym = self.level_of(i).symbol
            if sym == prev:
                count += 1
            else:
                if prev is not None:
                    runs.append((prev, count))
                prev, count = sym, 1
        runs.append((prev, count))
        body = "".join(f"{{{s}}}{n}" if n > 1 else f"{{{s}}}" for s, n in runs)
        return f"{body}:{t.name}"

    # -- misc --------------------------------------------------------------

    def __eq__(self, other):
        return (
            isinstance(other, TypedBitvector)
            and self.width == other.width
            and self.planes == other.planes
            and self.known == other.known
            and self.val == other.val
        )

    def __hash__(self):
        return hash((self.width, self.planes, self.known, self.val))

    def __repr__(self):
        return f"<bv{self.width} {self.display()}>"

    def validate(self) -> None:
        """Check representation invariants (used in tests, not on hot paths)."""
        full = (1 << self.width) - 1
        union = 0
        for i, p in enumerate(self.planes):
            if p & ~full:
                raise AssertionError("plane exceeds width")
            if p & union:
                raise AssertionError("planes overlap")
            union |= p
        if union != full:
            raise AssertionError("planes do not cover the width")
        if self.known & ~full or self.val & ~self.known:
            raise AssertionError("bad predicate masks")


def vector_type(v: TypedBitvector) -> SecurityType:
    """Vector-level security type by structural priority (SDD > URA > SID > WRA > CST)."""
    if v.width < 1:
        raise ValueError("empty bitvector has no type")
    return v.vector_type()


def mk_constant(value: int, width: int) -> TypedBitvector:
    """Constant vector: every bit CST with its value predicate set."""
    return TypedBitvector.constant(value, width)


# ---------------------------------------------------------------------------
# Expression / statement syntax
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitConst:
    value: int  # 0 or 1


@dataclass(frozen=True)
class VecConst:
    value: int
    width: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Not:
    e: "Expr"


@dataclass(frozen=True)
class BinOp:
    # op in {'&','|','^','+','-','*','/','<','<=','>','>=','==','!='}
    op: str
    a: "Expr"
    b: "Expr"


@dataclass(frozen=True)
class Cond:
    c: "Expr"
    a: "Expr"
    b: "Expr"


@dataclass(frozen=True)
class Concat:
    hi: "Expr"
    lo: "Expr"


@dataclass(frozen=True)
class Extract:
    lo: int
    hi: int
    e: "Expr"


Expr = object  # union of the node classes above


@dataclass(frozen=True)
class MemRef:
    """Symbolic memory operand ``[base + index*scale + disp]``.

    The concrete byte address is resolved per trace record from the logged
    register snapshot; the typed address expression is built from the same
    terms.
    """

    base: Optional[str] = None
    index: Optional[str] = None
    scale: int = 1
    disp: int = 0
    size: int = 4  # bytes

    def addr_expr(self) -> Expr:
        e = None
        if self.base is not None:
            e = Var(self.base)
        if self.index is not None:
            idx = Var(self.index)
            if self.scale != 1:
                idx = BinOp("*", idx, VecConst(self.scale, 32))
            e = idx if e is None else BinOp("+", e, idx)
        if e is None:
            return VecConst(self.disp & 0xFFFFFFFF, 32)
        if self.disp:
            e = BinOp("+", e, VecConst(self.disp & 0xFFFFFFFF, 32))
        return e


@dataclass(frozen=True)
class Assign:
    dst: str
    expr: Expr


@dataclass(frozen=True)
class Load:
    dst: str
    mem: MemRef


@dataclass(frozen=True)
class Store:
    mem: MemRef
    src: Expr


@dataclass(frozen=True)
class Seq:
    s1: "Stmt"
    s2: "Stmt"


Stmt = object  # union of Assign / Load / Store / Seq


# ---------------------------------------------------------------------------
# Type environment
# ---------------------------------------------------------------------------

GPRS = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp")
FLAGS = ("zf", "cf", "sf", "of")

# view name -> (parent register, low bit, width)
REG_VIEWS = {}
for _r in GPRS:
    REG_VIEWS[_r] = (_r, 0, 32)
for _r, _v in (("eax", "ax"), ("ebx", "bx"), ("ecx", "cx"), ("edx", "dx"),
               ("esi", "si"), ("edi", "di"), ("ebp", "bp"), ("esp", "sp")):
    REG_VIEWS[_v] = (_r, 0, 16)
for _r, _lo, _hi in (("eax", "al", "ah"), ("ebx", "bl", "bh"),
                     ("ecx", "cl", "ch"), ("edx", "dl", "dh")):
    REG_VIEWS[_lo] = (_r, 0, 8)
    REG_VIEWS[_hi] = (_r, 8, 8)


def reg_width(name: str) -> int:
    if name in REG_VIEWS:
        return REG_VIEWS[name][2]
    if name in FLAGS:
        return 1
    return 32  # analysis scratch temporaries


class TypeEnv:
    """Flow-sensitive map from variables to typed bitvectors.

    Registers are stored as canonical 32-bit vectors; sub-register names
    read and write bit ranges of the parent.  Flags are width-1 vectors.
    Memory is tracked per byte; absent registers and flags default to SID
    with no value predicate, absent memory bytes are resolved by the load
    rules in the inference engine.
    """

    __slots__ = ("vars", "mem")

    def __init__(self):
        self.vars = {}
        self.mem = {}

    def get(self, name: str) -> TypedBitvector:
        view = REG_VIEWS.get(name)
        if view is not None:
            parent, lo, width = view
            vec = self.vars.get(parent)
            if vec is None:
                return _SID_CACHE[width]
            if width == 32:
                return vec
            return _slice(vec, lo, width)
        vec = self.vars.get(name)
        if vec is None:
            return _SID_CACHE[1] if name in FLAGS else _SID_CACHE[32]
        return vec

    def set(self, name: str, value: TypedBitvector) -> None:
        view = REG_VIEWS.get(name)
        if view is not None:
            parent, lo, width = view
            if value.width != width:
                raise ValueError(f"{name} expects width {width}, got {value.width}")
            if width == 32:
                self.vars[parent] = value
            else:
                base = self.vars.get(parent)
                if base is None:
                    base = _SID_CACHE[32]
                self.vars[parent] = _splice(base, lo, value)
            return
        if name in FLAGS and value.width != 1:
            raise ValueError(f"flag {name} must be width 1")
        self.vars[name] = value

    def mem_get(self, addr: int) -> Optional[TypedBitvector]:
        return self.mem.get(addr & 0xFFFFFFFF)

    def mem_set(self, addr: int, byte: TypedBitvector) -> None:
        if byte.width != 8:
            raise ValueError("memory is tracked per byte")
        self.mem[addr & 0xFFFFFFFF] = byte

    def copy(self) -> "TypeEnv":
        env = TypeEnv()
        env.vars = dict(self.vars)
        env.mem = dict(self.mem)
        return env


_SID_CACHE = {w: TypedBitvector.filled(SID, w) for w in (1, 8, 16, 32)}


def _slice(v: TypedBitvector, lo: int, width: int) -> TypedBitvector:
    mask = (1 << width) - 1
    planes = tuple((p >> lo) & mask for p in v.planes)
    return TypedBitvector(width, planes, (v.known >> lo) & mask, (v.val >> lo) & mask)


def _splice(base: TypedBitvector, lo: int, part: TypedBitvector) -> TypedBitvector:
    hole = ((1 << part.width) - 1) << lo
    planes = tuple((bp & ~hole) | (pp << lo) for bp, pp in zip(base.planes, part.planes))
    known = (base.known & ~hole) | (part.known << lo)
    val = (base.val & ~hole) | (part.val << lo)
    return TypedBitvector(base.width, planes, known, val)


def annotate(env: TypeEnv, target, level: SecurityType) -> TypeEnv:
    """Mark a register or memory byte range with SDD (secret) or URA (random).

    ``target`` is ``("reg", name)`` or ``("mem", addr, length_bytes)``.  The
    marked bits get the given level with no value predicate; SID is the
    default for everything else and CST only enters via constants, so other
    levels are rejected.
    """
    if level not in (SDD, URA):
        raise ValueError("only SDD and URA can be annotated")
    kind = target[0]
    if kind == "reg":
        name = target[1]
        if name not in REG_VIEWS:
            raise ValueError(f"unknown register {name!r}")
        env.set(name, TypedBitvector.filled(level, REG_VIEWS[name][2]))
    elif kind == "mem":
        addr, length = target[1], target[2]
        byte = TypedBitvector.filled(level, 8)
        for i in range(length):
            env.mem_set(addr + i, byte)
    else:
        raise ValueError(f"unknown annotation target {target!r}")
    return env
