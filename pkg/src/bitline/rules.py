"""Type inference rules for bit-level security typing.

The evaluator maps expressions and statements over a ``TypeEnv``:

* bit rules for logical operations (conjunction/disjunction, xor, negation)
  including the constant-operand refinements that fold known bits;
* vector rules for concatenation, extraction, bitwise logic, arithmetic,
  comparison and conditional selection;
* statement rules threading the environment through assignments, loads and
  stores.

Two value refinements beyond plain level joins are implemented here:

* arithmetic keeps the statically determined high bits of a result when the
  operand intervals (derived from value predicates) pin them, so masking a
  secret and adding a table base keeps the table's alignment bits constant;
* comparisons whose operand intervals force the outcome produce a constant
  flag, which later suppresses branch findings for conditions that can only
  evaluate one way.

Every operation optionally records the names of the rules it applied into a
caller-supplied list; ``format_rules`` renders that list the way the verbose
report prints it.

All functions are pure with respect to their vector arguments; ``exec_stmt``
mutates the given environment in place and returns it (one sequential pass
per trace; copy the environment for anything else).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

from .ir import (
    CST, URA, WRA, SID, SDD,
    Assign, BinOp, BitConst, Concat, Cond, Extract, Load, MemRef, Not,
    RefinedBit, SecurityType, Seq, Store, TypedBitvector, Var, VecConst,
    join,
)


class AnalysisError(Exception):
    """Raised when a trace uses a construct the rules cannot type."""


def _rec(rules, name):
    if rules is not None:
        rules.append(name)


# ---------------------------------------------------------------------------
# Single-bit rules (reference semantics; the vector paths mirror these)
# ---------------------------------------------------------------------------


def infer_bit_logic(op: str, b1: RefinedBit, b2: RefinedBit) -> RefinedBit:
    """AND/OR on one bit: constant refinements first, then URA demotion, then join."""
    if op == "&":
        if (b1.sec is CST and b1.value == 0) or (b2.sec is CST and b2.value == 0):
            return RefinedBit(CST, 0)  # Const-Conj.I
        if b2.sec is CST and b2.value == 1:
            return b1  # Const-Conj.II
        if b1.sec is CST and b1.value == 1:
            return b2
    elif op == "|":
        if (b1.sec is CST and b1.value == 1) or (b2.sec is CST and b2.value == 1):
            return RefinedBit(CST, 1)  # Const-Disj.II
        if b2.sec is CST and b2.value == 0:
            return b1  # Const-Disj.I
        if b1.sec is CST and b1.value == 0:
            return b2
    else:
        raise ValueError(f"not a conjunction/disjunction: {op!r}")
    if b1.sec is URA and b2.sec is URA:
        return RefinedBit(WRA)  # Conj&Disj.II: uniformity is lost
    return RefinedBit(join(b1.sec, b2.sec))  # Conj&Disj.I


def infer_bit_xor(b1: RefinedBit, b2: RefinedBit, same_operand: bool = False) -> RefinedBit:
    if same_operand:
        if b1.sec is CST:
            return RefinedBit(CST, 0)  # XOR.IV
        if b1.sec is URA:
            return RefinedBit(URA)  # XOR.II; mask reuse is not detected
        return RefinedBit(b1.sec)
    if b1.sec is URA or b2.sec is URA:
        return RefinedBit(URA)  # XOR.II: a fresh random operand blinds the result
    if b1.sec is CST and b2.sec is CST:
        if b1.value is not None and b2.value is not None:
            return RefinedBit(CST, b1.value ^ b2.value)  # XOR.III
        return RefinedBit(CST)
    return RefinedBit(join(b1.sec, b2.sec))  # XOR.I


def infer_neg(b: RefinedBit) -> RefinedBit:
    """Negation keeps the security level and flips a known value."""
    if b.value is None:
        return RefinedBit(b.sec)  # Neg.I
    return RefinedBit(b.sec, 1 - b.value)  # Neg.II / Neg.III


# ---------------------------------------------------------------------------
# Vector helpers
# ---------------------------------------------------------------------------


def _max_planes(p1, p2, mask):
    """Per-bit level join of two plane tuples, restricted to ``mask``."""
    sdd = (p1[SDD] | p2[SDD]) & mask
    rem = mask & ~sdd
    sid = (p1[SID] | p2[SID]) & rem
    rem &= ~sid
    wra = (p1[WRA] | p2[WRA]) & rem
    rem &= ~wra
    ura = (p1[URA] | p2[URA]) & rem
    return (rem & ~ura, ura, wra, sid, sdd)


def _merge(acc, extra):
    return [a | e for a, e in zip(acc, extra)]


@lru_cache(maxsize=4096)
def _const_vec(value: int, width: int) -> TypedBitvector:
    return TypedBitvector.constant(value, width)


def _level_vec(level: SecurityType, width: int) -> TypedBitvector:
    return TypedBitvector.filled(level, width)


# ---------------------------------------------------------------------------
# Vector rules
# ---------------------------------------------------------------------------


def infer_logic_vec(op, v1, v2, same_operand=False, rules=None):
    """Bitwise AND/OR/XOR over equal-width vectors (bit rules applied per bit)."""
    if v1.width != v2.width:
        raise AnalysisError(f"width mismatch in {op}: {v1.width} vs {v2.width}")
    if v1.width > 1:
        _rec(rules, "Logic.I")
    if op == "^":
        return _xor_vec(v1, v2, same_operand, rules)
    if op == "&":
        return _and_vec(v1, v2, rules)
    if op == "|":
        return _or_vec(v1, v2, rules)
    raise ValueError(f"not a logic op: {op!r}")


def _and_vec(v1, v2, rules):
    full = (1 << v1.width) - 1
    k0_1 = v1.planes[CST] & v1.known & ~v1.val
    k1_1 = v1.planes[CST] & v1.known & v1.val
    k0_2 = v2.planes[CST] & v2.known & ~v2.val
    k1_2 = v2.planes[CST] & v2.known & v2.val
    res0 = k0_1 | k0_2
    take1 = k1_2 & ~res0  # right operand is a known 1: pass the left bit through
    take2 = k1_1 & ~res0 & ~take1
    rest = full & ~(res0 | take1 | take2)
    wra = v1.planes[URA] & v2.planes[URA] & rest
    jm = rest & ~wra
    if full & ~wra:
        _rec(rules, "Conj&Disj.I")
    if wra:
        _rec(rules, "Conj&Disj.II")
    if res0:
        _rec(rules, "Const-Conj.I")
    if take1 | take2:
        _rec(rules, "Const-Conj.II")
    planes = [res0, 0, wra, 0, 0]
    planes = _merge(planes, (p & take1 for p in v1.planes))
    planes = _merge(planes, (p & take2 for p in v2.planes))
    planes = _merge(planes, _max_planes(v1.planes, v2.planes, jm))
    known = res0 | (v1.known & take1) | (v2.known & take2)
    val = (v1.val & take1) | (v2.val & take2)
    return TypedBitvector(v1.width, tuple(planes), known, val)


def _or_vec(v1, v2, rules):
    full = (1 << v1.width) - 1
    k0_1 = v1.planes[CST] & v1.known & ~v1.val
    k1_1 = v1.planes[CST] & v1.known & v1.val
    k0_2 = v2.planes[CST] & v2.known & ~v2.val
    k1_2 = v2.planes[CST] & v2.known & v2.val
    res1 = k1_1 | k1_2
    take1 = k0_2 & ~res1  # right operand is a known 0: pass the left bit through
    take2 = k0_1 & ~res1 & ~take1
    rest = full & ~(res1 | take1 | take2)
    wra = v1.planes[URA] & v2.planes[URA] & rest
    jm = rest & ~wra
    if full & ~wra:
        _rec(rules, "Conj&Disj.I")
    if wra:
        _rec(rules, "Conj&Disj.II")
    if take1 | take2:
        _rec(rules, "Const-Disj.I")
    if res1:
        _rec(rules, "Const-Disj.II")
    planes = [res1, 0, wra, 0, 0]
    planes = _merge(planes, (p & take1 for p in v1.planes))
    planes = _merge(planes, (p & take2 for p in v2.planes))
    planes = _merge(planes, _max_planes(v1.planes, v2.planes, jm))
    known = res1 | (v1.known & take1) | (v2.known & take2)
    val = res1 | (v1.val & take1) | (v2.val & take2)
    return TypedBitvector(v1.width, tuple(planes), known, val)


def _xor_vec(v1, v2, same_operand, rules):
    full = (1 << v1.width) - 1
    planes = [0, 0, 0, 0, 0]
    if same_operand:
        cstm = v1.planes[CST]
        rest = full & ~cstm
        ura = v1.planes[URA] & rest
        jm = rest & ~ura
        if jm:
            _rec(rules, "XOR.I")
        if ura:
            _rec(rules, "XOR.II")
        if cstm:
            _rec(rules, "XOR.IV")
        planes[CST] = cstm
        planes[URA] = ura
        planes = _merge(planes, (p & jm for p in v1.planes))
        return TypedBitvector(v1.width, tuple(planes), cstm, 0)
    ura = (v1.planes[URA] | v2.planes[URA]) & full
    rest = full & ~ura
    bothc = v1.planes[CST] & v2.planes[CST] & rest
    foldm = bothc & v1.known & v2.known
    jm = rest & ~bothc
    if jm:
        _rec(rules, "XOR.I")
    if ura:
        _rec(rules, "XOR.II")
    if bothc:
        _rec(rules, "XOR.III")
    planes[URA] = ura
    planes[CST] = bothc
    planes = _merge(planes, _max_planes(v1.planes, v2.planes, jm))
    return TypedBitvector(v1.width, tuple(planes), foldm, (v1.val ^ v2.val) & foldm)


def infer_not_vec(v, rules=None):
    """Bitwise negation: levels unchanged, known values flipped."""
    if v.width > 1:
        _rec(rules, "Logic.II")
    if v.known != (1 << v.width) - 1:
        _rec(rules, "Neg.I")
    flipped = v.known & ~v.val
    if flipped:
        _rec(rules, "Neg.II")
    if v.known & v.val:
        _rec(rules, "Neg.III")
    return TypedBitvector(v.width, v.planes, v.known, flipped)


def infer_concat(hi, lo, rules=None):
    """Concatenation; ``hi`` supplies the most significant bits."""
    t_hi, t_lo = hi.vector_type(), lo.vector_type()
    if t_hi is URA or t_lo is URA:
        other = t_lo if t_hi is URA else t_hi
        _rec(rules, "Concat.II-2" if other is SDD else "Concat.II-1")
    else:
        _rec(rules, "Concat.I")
    s = lo.width
    planes = tuple((h << s) | l for h, l in zip(hi.planes, lo.planes))
    return TypedBitvector(hi.width + lo.width, planes,
                          (hi.known << s) | lo.known, (hi.val << s) | lo.val)


def infer_extract(lo: int, hi: int, v, rules=None):
    """Bits ``lo..hi`` of ``v`` verbatim (levels and predicates)."""
    if not (0 <= lo <= hi < v.width):
        raise AnalysisError(f"extract [{lo}:{hi}] out of range for width {v.width}")
    _rec(rules, "Extraction")
    width = hi - lo + 1
    mask = (1 << width) - 1
    planes = tuple((p >> lo) & mask for p in v.planes)
    return TypedBitvector(width, planes, (v.known >> lo) & mask, (v.val >> lo) & mask)


def infer_shift(v, amount: int, direction: str, rules=None):
    """Shift by a known amount, composed from extraction and concatenation.

    x86 masks shift counts to five bits; callers must reject non-constant
    amounts before getting here.
    """
    amount &= 0x1F
    w = v.width
    if amount == 0:
        return v
    if direction == "shl":
        if amount >= w:
            return _const_vec(0, w)
        body = infer_extract(0, w - 1 - amount, v, rules)
        return infer_concat(body, _const_vec(0, amount), rules)
    if direction == "shr":
        if amount >= w:
            return _const_vec(0, w)
        body = infer_extract(amount, w - 1, v, rules)
        return infer_concat(_const_vec(0, amount), body, rules)
    if direction == "sar":
        amount = min(amount, w - 1)
        body = infer_extract(amount, w - 1, v, rules)
        return infer_concat(_replicate_msb(v, amount), body, rules)
    raise ValueError(f"unknown shift direction {direction!r}")


def _replicate_msb(v, count):
    m = 1 << (v.width - 1)
    rep = (1 << count) - 1
    planes = tuple(rep if p & m else 0 for p in v.planes)
    known = rep if v.known & m else 0
    val = rep if v.val & m else 0
    return TypedBitvector(count, planes, known, val)


def infer_arith(op, v1, v2, rules=None, diagnostics=None):
    """Arithmetic on equal-width vectors.

    The security level is decided at the vector level (a uniformly random
    operand absorbs anything non-secret; otherwise the join propagates to
    every bit).  On the join path, operand intervals recovered from value
    predicates pin the result bits above the highest position the result can
    vary at; those bits stay constant with their values, which is how a
    small secret index added to an aligned base keeps the base's upper bits.
    """
    if v1.width != v2.width:
        raise AnalysisError(f"width mismatch in {op}: {v1.width} vs {v2.width}")
    w = v1.width
    full = (1 << w) - 1
    t1, t2 = v1.vector_type(), v2.vector_type()
    if t1 is URA or t2 is URA:
        other = t2 if t1 is URA else t1
        if other is SDD:
            _rec(rules, "Arith.II-2")
            return _level_vec(SDD, w)
        _rec(rules, "Arith.II-1")
        return _level_vec(URA, w)
    _rec(rules, "Arith.I")
    level = join(t1, t2)
    lo1, hi1 = v1.interval()
    lo2, hi2 = v2.interval()
    bounds = None
    if op == "+":
        bounds = (lo1 + lo2, hi1 + hi2)
    elif op == "-":
        bounds = (lo1 - hi2, hi1 - lo2)
    elif op == "*":
        bounds = (lo1 * lo2, hi1 * hi2)
    elif op == "/":
        if hi2 == 0:
            if diagnostics is not None:
                diagnostics.append("division by a constant zero divisor")
        elif lo2 > 0:
            bounds = (lo1 // hi2, hi1 // lo2)
        # a divisor that may be zero leaves the result unconstrained
    else:
        raise ValueError(f"not an arithmetic op: {op!r}")
    known = 0
    val = 0
    if bounds is not None:
        lo, hi = bounds
        if (lo >> w) == (hi >> w):  # no wrap straddle modulo 2^w
            lo &= full
            hi &= full
            diff = lo ^ hi
            if diff == 0:
                return TypedBitvector(w, (full, 0, 0, 0, 0), full, lo)
            p = diff.bit_length()
            known = full & ~((1 << p) - 1)
            val = lo & known
    planes = [0, 0, 0, 0, 0]
    if known:
        planes[CST] = known
        planes[level] = full & ~known
        _rec(rules, "Concat.I")
    else:
        planes[level] = full
    return TypedBitvector(w, tuple(planes), known, val)


def _signed_interval(v):
    w = v.width
    sign = 1 << (w - 1)
    lo, hi = v.interval()
    if v.known & sign:
        off = (1 << w) if v.val & sign else 0
        return lo - off, hi - off
    return (lo | sign) - (1 << w), hi & ~sign


def _forced_outcome(op, alo, ahi, blo, bhi):
    if op == "<":
        if ahi < blo:
            return 1
        if alo >= bhi:
            return 0
    elif op == "<=":
        if ahi <= blo:
            return 1
        if alo > bhi:
            return 0
    elif op == ">":
        if alo > bhi:
            return 1
        if ahi <= blo:
            return 0
    elif op == ">=":
        if alo >= bhi:
            return 1
        if ahi < blo:
            return 0
    elif op == "==":
        if alo == ahi == blo == bhi:
            return 1
        if ahi < blo or bhi < alo:
            return 0
    elif op == "!=":
        forced = _forced_outcome("==", alo, ahi, blo, bhi)
        return None if forced is None else 1 - forced
    else:
        raise ValueError(f"not a comparison: {op!r}")
    return None


def infer_comp(op, v1, v2, signed=False, rules=None):
    """Comparison producing a one-bit vector.

    When the operand intervals force the outcome the flag folds to a
    constant; otherwise it takes the join of the operand vector types.
    """
    if v1.width != v2.width:
        raise AnalysisError(f"width mismatch in {op}: {v1.width} vs {v2.width}")
    _rec(rules, "Comp")
    if signed:
        alo, ahi = _signed_interval(v1)
        blo, bhi = _signed_interval(v2)
    else:
        alo, ahi = v1.interval()
        blo, bhi = v2.interval()
    forced = _forced_outcome(op, alo, ahi, blo, bhi)
    if forced is not None:
        return _const_vec(forced, 1)
    return _level_vec(join(v1.vector_type(), v2.vector_type()), 1)


def infer_cond(c, v1, v2, rules=None):
    """Conditional selection ``c ? v1 : v2``.

    A secret condition makes every result bit secret (implicit flow).  A
    condition with a known constant value selects that branch verbatim;
    anything else joins the two branch types.
    """
    if v1.width != v2.width:
        raise AnalysisError("conditional branches must have equal widths")
    if c.width != 1:
        raise AnalysisError("condition must be one bit")
    if c.vector_type() is SDD:
        _rec(rules, "Cond.I")
        return _level_vec(SDD, v1.width)
    _rec(rules, "Cond.II")
    if c.known & 1 and c.planes[CST] & 1:
        return v1 if c.val & 1 else v2
    return _level_vec(join(v1.vector_type(), v2.vector_type()), v1.width)


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------

_LOGIC_OPS = frozenset("&|^")
_ARITH_OPS = frozenset("+-*/")
_COMP_OPS = frozenset(("<", "<=", ">", ">=", "==", "!="))


def eval_expr(e, env, memo=None, rules=None, diagnostics=None):
    """Evaluate an expression to a typed bitvector under ``env``.

    ``memo`` caches results by node identity for the duration of one trace
    record, so shared sub-expressions (flag formulas reusing the result
    expression) are typed once against the pre-statement state.
    """
    if memo is not None:
        hit = memo.get(id(e))
        if hit is not None:
            return hit
    t = type(e)
    if t is Var:
        v = env.get(e.name)
    elif t is VecConst:
        v = _const_vec(e.value, e.width)
    elif t is BitConst:
        v = _const_vec(e.value, 1)
    elif t is BinOp:
        a = eval_expr(e.a, env, memo, rules, diagnostics)
        b = eval_expr(e.b, env, memo, rules, diagnostics)
        op = e.op
        if op in _LOGIC_OPS:
            v = infer_logic_vec(op, a, b, same_operand=(e.a == e.b), rules=rules)
        elif op in _ARITH_OPS:
            v = infer_arith(op, a, b, rules=rules, diagnostics=diagnostics)
        elif op in _COMP_OPS:
            v = infer_comp(op, a, b, rules=rules)
        elif op in ("<s", "<=s", ">s", ">=s"):
            v = infer_comp(op[:-1], a, b, signed=True, rules=rules)
        else:
            raise AnalysisError(f"unknown operator {op!r}")
    elif t is Not:
        v = infer_not_vec(eval_expr(e.e, env, memo, rules, diagnostics), rules)
    elif t is Concat:
        hi = eval_expr(e.hi, env, memo, rules, diagnostics)
        lo = eval_expr(e.lo, env, memo, rules, diagnostics)
        v = infer_concat(hi, lo, rules)
    elif t is Extract:
        v = infer_extract(e.lo, e.hi, eval_expr(e.e, env, memo, rules, diagnostics), rules)
    elif t is Cond:
        c = eval_expr(e.c, env, memo, rules, diagnostics)
        a = eval_expr(e.a, env, memo, rules, diagnostics)
        b = eval_expr(e.b, env, memo, rules, diagnostics)
        v = infer_cond(c, a, b, rules)
    else:
        raise AnalysisError(f"cannot evaluate {e!r}")
    if memo is not None:
        memo[id(e)] = v
    return v


# ---------------------------------------------------------------------------
# Statement execution
# ---------------------------------------------------------------------------


@dataclass
class MemAccess:
    """One typed memory access observed while executing a record."""

    kind: str  # "load" or "store"
    concrete: int
    addr_vec: TypedBitvector
    addr_rules: list
    mem: MemRef


@lru_cache(maxsize=None)
def _addr_expr(mem: MemRef):
    return mem.addr_expr()


def exec_stmt(stmt, env, regs=None, memo=None, rules=None,
              mem_log=None, updates=None, diagnostics=None):
    """Execute one statement, updating and returning the environment.

    Assignments overwrite the destination with the inferred vector
    (predicates included).  Loads copy tracked memory bytes; untracked bytes
    take the loaded-from address's security level (floored at SID, since the
    data itself is unknown), which carries the implicit flow of a
    secret-indexed lookup.  Stores write the source vector bytewise.  ``Seq``
    threads the environment left to right.
    """
    t = type(stmt)
    if t is Assign:
        v = eval_expr(stmt.expr, env, memo, rules, diagnostics)
        env.set(stmt.dst, v)
        if updates is not None:
            updates.append((stmt.dst, v))
        return env
    if t is Load:
        mem = stmt.mem
        addr_rules = [] if mem_log is not None else None
        addr_vec = eval_expr(_addr_expr(mem), env, memo, addr_rules, diagnostics)
        concrete = mem_concrete(mem, regs)
        fill_level = addr_vec.vector_type()
        if fill_level < SID:
            fill_level = SID
        planes = [0, 0, 0, 0, 0]
        known = 0
        val = 0
        for i in range(mem.size):
            b = env.mem.get((concrete + i) & 0xFFFFFFFF)
            if b is None:
                b = _level_vec(fill_level, 8)
            sh = 8 * i
            planes = [acc | (p << sh) for acc, p in zip(planes, b.planes)]
            known |= b.known << sh
            val |= b.val << sh
        v = TypedBitvector(8 * mem.size, tuple(planes), known, val)
        env.set(stmt.dst, v)
        if updates is not None:
            updates.append((stmt.dst, v))
        if mem_log is not None:
            mem_log.append(MemAccess("load", concrete, addr_vec, addr_rules, mem))
        return env
    if t is Store:
        mem = stmt.mem
        addr_rules = [] if mem_log is not None else None
        addr_vec = eval_expr(_addr_expr(mem), env, memo, addr_rules, diagnostics)
        concrete = mem_concrete(mem, regs)
        v = eval_expr(stmt.src, env, memo, rules, diagnostics)
        if v.width != 8 * mem.size:
            raise AnalysisError(f"store width {v.width} != operand size {mem.size * 8}")
        mask = 0xFF
        for i in range(mem.size):
            sh = 8 * i
            byte = TypedBitvector(
                8,
                tuple((p >> sh) & mask for p in v.planes),
                (v.known >> sh) & mask,
                (v.val >> sh) & mask,
            )
            env.mem_set(concrete + i, byte)
        if mem_log is not None:
            mem_log.append(MemAccess("store", concrete, addr_vec, addr_rules, mem))
        return env
    if t is Seq:
        exec_stmt(stmt.s1, env, regs, memo, rules, mem_log, updates, diagnostics)
        return exec_stmt(stmt.s2, env, regs, memo, rules, mem_log, updates, diagnostics)
    raise AnalysisError(f"cannot execute {stmt!r}")


def mem_concrete(mem: MemRef, regs) -> int:
    """Concrete byte address of a memory operand from a register snapshot."""
    if regs is None:
        raise AnalysisError("memory access requires a register snapshot")
    addr = mem.disp
    if mem.base is not None:
        addr += regs[mem.base]
    if mem.index is not None:
        addr += regs[mem.index] * mem.scale
    return addr & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# Rule trace formatting
# ---------------------------------------------------------------------------


def format_rules(names) -> str:
    """Deduplicate applied-rule names and merge paired constant rules.

    ``Const-Conj.I`` plus ``Const-Conj.II`` collapse to ``Const-Conj.I&II``
    (likewise for disjunction), matching how the inference log prints rows.
    """
    seen = []
    for n in names:
        if n not in seen:
            seen.append(n)
    for fam in ("Const-Conj", "Const-Disj"):
        one, two = f"{fam}.I", f"{fam}.II"
        if one in seen and two in seen:
            seen[seen.index(one)] = f"{fam}.I&II"
            seen.remove(two)
    return ", ".join(seen)


@dataclass
class RuleTrace:
    """Per-record inference log entry: applied rules plus resulting types."""

    seq: int
    addr: int
    asm: str
    rules: list = field(default_factory=list)
    values: list = field(default_factory=list)  # (variable name, display string)
    notes: list = field(default_factory=list)

    @property
    def rules_display(self) -> str:
        return format_rules(self.rules)
