"""Trace parsing, instruction lifting, annotations, and the taint pre-pass.

Trace format (UTF-8, line oriented, ``#`` starts a comment)::

    T <seq> 0x<addr> <mnemonic> <operands> | eax=0x.. ebx=0x.. ecx=0x.. \
edx=0x.. esi=0x.. edi=0x.. ebp=0x.. esp=0x..

``seq`` is decimal and contiguous from 0; the register snapshot is the
pre-execution state and supplies the concrete values memory operands are
resolved with.

Annotation format::

    SECRET reg <name> @<seq>
    SECRET mem 0x<addr> <len> @<seq>
    RANDOM reg <name> @<seq>
    RANDOM mem 0x<addr> <len> @<seq>

Lifting turns each instruction into plain IR statements plus flag-update
assignments.  Templates are cached per instruction text: every expression
node referring to pre-instruction state is one shared object, commits are
ordered so reads happen against the pre-state (the per-record evaluation
memo pins shared sub-expressions to their first value), and conditional
jumps carry the consumed flag expression instead of mutating state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from .ir import (
    Assign, BinOp, BitConst, Concat, Cond, Extract, Load, MemRef, Not,
    Store, TypeEnv, Var, VecConst, annotate,
    GPRS, REG_VIEWS, SDD, URA,
)
from . import rules as R


class TraceError(Exception):
    pass


class LiftError(Exception):
    pass


REG_ORDER = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp")

_BASE_MNEMONICS = {
    "mov", "movzx", "movsx", "lea", "add", "sub", "mul", "imul", "div",
    "and", "or", "xor", "not", "neg", "shl", "shr", "sar", "test", "cmp",
    "jmp", "push", "pop",
}

# condition-code -> expression over the flag variables
_ZF, _CF, _SF, _OF = Var("zf"), Var("cf"), Var("sf"), Var("of")
_SLT = BinOp("^", _SF, _OF)  # signed less-than after a subtraction
_CC_EXPRS = {
    "e": _ZF, "z": _ZF,
    "ne": Not(_ZF), "nz": Not(_ZF),
    "b": _CF, "c": _CF, "nae": _CF,
    "ae": Not(_CF), "nb": Not(_CF), "nc": Not(_CF),
    "a": BinOp("&", Not(_CF), Not(_ZF)), "nbe": BinOp("&", Not(_CF), Not(_ZF)),
    "be": BinOp("|", _CF, _ZF), "na": BinOp("|", _CF, _ZF),
    "l": _SLT, "nge": _SLT,
    "ge": Not(_SLT), "nl": Not(_SLT),
    "g": BinOp("&", Not(_ZF), Not(_SLT)), "nle": BinOp("&", Not(_ZF), Not(_SLT)),
    "le": BinOp("|", _ZF, _SLT), "ng": BinOp("|", _ZF, _SLT),
    "s": _SF, "ns": Not(_SF),
}


def is_supported_mnemonic(m: str) -> bool:
    if m in _BASE_MNEMONICS:
        return True
    if m.startswith("j") and m[1:] in _CC_EXPRS:
        return True
    if m.startswith("cmov") and m[4:] in _CC_EXPRS:
        return True
    return False


# ---------------------------------------------------------------------------
# Trace records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    addr: int
    text: str  # mnemonic plus operand text, e.g. "mov eax,[ebp+0x8]"
    regs: dict

    @property
    def mnemonic(self) -> str:
        return self.text.split(None, 1)[0]


def parse_trace(text: str) -> list:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append(_parse_trace_line(line, len(records)))
        except TraceError as exc:
            raise TraceError(f"line {lineno}: {exc}") from exc
    return records


def _parse_trace_line(line: str, expect_seq: int) -> TraceRecord:
    if "|" not in line:
        raise TraceError("missing register snapshot separator '|'")
    head, _, tail = line.partition("|")
    parts = head.split(None, 3)
    if len(parts) < 4 or parts[0] != "T":
        raise TraceError(f"malformed record head {head.strip()!r}")
    try:
        seq = int(parts[1], 10)
        addr = int(parts[2], 16)
    except ValueError as exc:
        raise TraceError(f"bad sequence/address field: {exc}") from exc
    if seq != expect_seq:
        raise TraceError(f"non-contiguous sequence: expected {expect_seq}, got {seq}")
    text = " ".join(parts[3].split())
    mnem = text.split(None, 1)[0]
    if not is_supported_mnemonic(mnem):
        raise TraceError(f"unknown mnemonic {mnem!r}")
    regs = {}
    fields = tail.split()
    if len(fields) != 8:
        raise TraceError(f"expected 8 register fields, got {len(fields)}")
    for name, fld in zip(REG_ORDER, fields):
        key, _, value = fld.partition("=")
        if key != name:
            raise TraceError(f"register fields must appear in order {REG_ORDER}; got {key!r}")
        try:
            regs[name] = int(value, 16) & 0xFFFFFFFF
        except ValueError as exc:
            raise TraceError(f"bad register value {fld!r}") from exc
    return TraceRecord(seq, addr, text, regs)


def serialize_trace(records) -> str:
    out = []
    for r in records:
        regs = " ".join(f"{n}={r.regs[n]:#x}" for n in REG_ORDER)
        out.append(f"T {r.seq} {r.addr:#x} {r.text} | {regs}")
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    kind: str  # SECRET or RANDOM
    target: tuple  # ("reg", name) or ("mem", addr, length)
    at_seq: int

    @property
    def level(self):
        return SDD if self.kind == "SECRET" else URA


@dataclass
class AnnotationSet:
    entries: list = field(default_factory=list)

    def at(self, seq: int) -> list:
        return [a for a in self.entries if a.at_seq == seq]

    def max_seq(self) -> int:
        return max((a.at_seq for a in self.entries), default=-1)


def parse_annotations(text: str) -> AnnotationSet:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            kind = parts[0]
            if kind not in ("SECRET", "RANDOM"):
                raise ValueError(f"unknown annotation kind {kind!r}")
            if parts[1] == "reg" and len(parts) == 4:
                target = ("reg", parts[2])
                if parts[2] not in REG_VIEWS:
                    raise ValueError(f"unknown register {parts[2]!r}")
                at = parts[3]
            elif parts[1] == "mem" and len(parts) == 5:
                target = ("mem", int(parts[2], 16), int(parts[3], 0))
                at = parts[4]
            else:
                raise ValueError("expected 'reg <name> @<seq>' or 'mem 0x<addr> <len> @<seq>'")
            if not at.startswith("@"):
                raise ValueError(f"expected @<seq>, got {at!r}")
            entries.append(Annotation(kind, target, int(at[1:], 10)))
        except (ValueError, IndexError) as exc:
            raise TraceError(f"annotation line {lineno}: {exc}") from exc
    _check_annotation_conflicts(entries)
    return AnnotationSet(entries)


def _check_annotation_conflicts(entries) -> None:
    seen = {}
    for a in entries:
        if a.target[0] == "reg":
            keys = [("reg", REG_VIEWS[a.target[1]][0], a.at_seq)]
        else:
            keys = [("mem", a.target[1] + i, a.at_seq) for i in range(a.target[2])]
        for k in keys:
            prev = seen.get(k)
            if prev is not None and prev != a.kind:
                raise TraceError(f"conflicting annotations for {k[0]} target at seq {a.at_seq}")
            seen[k] = a.kind


def build_initial_env(ann: AnnotationSet) -> TypeEnv:
    """Environment with the seq-0 annotations applied; later entries are
    applied by the analysis loop when it reaches their record."""
    env = TypeEnv()
    for a in ann.at(0):
        annotate(env, a.target, a.level)
    return env


def apply_annotations(env: TypeEnv, ann: AnnotationSet, seq: int) -> None:
    for a in ann.at(seq):
        annotate(env, a.target, a.level)


# ---------------------------------------------------------------------------
# Operand parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegOperand:
    name: str

    @property
    def width(self):
        return REG_VIEWS[self.name][2]


@dataclass(frozen=True)
class ImmOperand:
    value: int


@dataclass(frozen=True)
class MemOperand:
    ref: MemRef  # size may still be 0 (unsized) until fixed by context


_SIZES = {"byte": 1, "word": 2, "dword": 4}


def parse_operand(tok: str):
    tok = tok.strip()
    size = 0
    lowered = tok.lower()
    for prefix, n in _SIZES.items():
        if lowered.startswith(prefix + " ") or lowered.startswith(prefix + "["):
            rest = tok[len(prefix):].strip()
            if rest.lower().startswith("ptr"):
                rest = rest[3:].strip()
            size = n
            tok = rest
            break
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise LiftError(f"malformed memory operand {tok!r}")
        return MemOperand(_parse_memref(tok[1:-1], size))
    if size:
        raise LiftError(f"size prefix on non-memory operand {tok!r}")
    if tok in REG_VIEWS:
        return RegOperand(tok)
    try:
        return ImmOperand(int(tok, 0))
    except ValueError as exc:
        raise LiftError(f"cannot parse operand {tok!r}") from exc


def _parse_memref(body: str, size: int) -> MemRef:
    base = None
    index = None
    scale = 1
    disp = 0
    body = body.replace(" ", "")
    if not body:
        raise LiftError("empty memory operand")
    # split into signed terms
    terms = []
    cur = ""
    sign = 1
    for ch in body:
        if ch in "+-" and cur:
            terms.append((sign, cur))
            sign = 1 if ch == "+" else -1
            cur = ""
        elif ch in "+-" and not cur:
            sign = sign if ch == "+" else -sign
        else:
            cur += ch
    if cur:
        terms.append((sign, cur))
    for sgn, term in terms:
        if "*" in term:
            x, _, y = term.partition("*")
            if x in REG_VIEWS:
                reg, sc = x, y
            elif y in REG_VIEWS:
                reg, sc = y, x
            else:
                raise LiftError(f"bad scaled index {term!r}")
            if sgn < 0:
                raise LiftError("negative scaled index is not supported")
            if index is not None:
                raise LiftError("two scaled index terms")
            try:
                scale = int(sc, 0)
            except ValueError as exc:
                raise LiftError(f"bad scale in {term!r}") from exc
            if scale not in (1, 2, 4, 8):
                raise LiftError(f"scale must be 1/2/4/8, got {scale}")
            index = reg
        elif term in REG_VIEWS:
            if REG_VIEWS[term][2] != 32:
                raise LiftError(f"address register must be 32-bit: {term!r}")
            if sgn < 0:
                raise LiftError("negated base register is not supported")
            if base is None:
                base = term
            elif index is None:
                index = term
            else:
                raise LiftError("too many address registers")
        else:
            try:
                disp += sgn * int(term, 0)
            except ValueError as exc:
                raise LiftError(f"bad displacement {term!r}") from exc
    return MemRef(base, index, scale, disp & 0xFFFFFFFF, size)


def resolve_address(operand, regs) -> int:
    """Concrete address of a memory operand under a register snapshot."""
    ref = operand.ref if isinstance(operand, MemOperand) else operand
    return R.mem_concrete(ref, regs)


# ---------------------------------------------------------------------------
# Lifting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchSpec:
    cond: Optional[object]  # flag expression; None for unconditional jumps
    target: int
    cc: str


@dataclass(frozen=True)
class LiftedTemplate:
    asm: str
    stmts: tuple
    main_idx: tuple  # statement indices whose rules the report displays
    show_idx: tuple  # statement indices whose results the report displays
    branch: Optional[BranchSpec]
    reads: tuple  # canonical register/flag/temp names read
    writes_full: tuple  # canonical names fully overwritten
    writes_partial: tuple  # canonical names partially overwritten
    mem_reads: tuple  # MemRef operands read
    mem_writes: tuple  # MemRef operands written


def lift(rec: TraceRecord) -> LiftedTemplate:
    """Lift one record's instruction; templates are cached by instruction text."""
    try:
        return _lift_text(rec.text)
    except LiftError as exc:
        raise LiftError(f"seq {rec.seq} at {rec.addr:#x}: {exc}") from exc


def _canon(name: str) -> str:
    return REG_VIEWS[name][0] if name in REG_VIEWS else name


def _mem_regs(ref: MemRef):
    out = []
    if ref.base is not None:
        out.append(ref.base)
    if ref.index is not None:
        out.append(ref.index)
    return out


class _Builder:
    """Accumulates the statements and bookkeeping for one template."""

    def __init__(self, asm):
        self.asm = asm
        self.stmts = []
        self.main = []
        self.show = []
        self.reads = []
        self.writes_full = []
        self.writes_partial = []
        self.mem_reads = []
        self.mem_writes = []
        self.branch = None

    def read_reg(self, name):
        self.reads.append(_canon(name))

    def write_reg(self, name):
        if name in REG_VIEWS and REG_VIEWS[name][2] < 32:
            self.writes_partial.append(_canon(name))
        else:
            self.writes_full.append(_canon(name))

    def emit(self, stmt, main=False, show=False):
        self.stmts.append(stmt)
        if main:
            self.main.append(len(self.stmts) - 1)
        if show:
            self.show.append(len(self.stmts) - 1)

    def done(self):
        return LiftedTemplate(
            self.asm, tuple(self.stmts), tuple(self.main), tuple(self.show),
            self.branch, tuple(self.reads), tuple(self.writes_full),
            tuple(self.writes_partial), tuple(self.mem_reads), tuple(self.mem_writes),
        )


def _split_operands(s: str):
    out = []
    depth = 0
    cur = ""
    for ch in s:
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            cur += ch
    if cur.strip():
        out.append(cur)
    return [parse_operand(tok) for tok in out]


def parse_instruction(text: str):
    """Split an instruction into (mnemonic, parsed operand list)."""
    parts = text.split(None, 1)
    return parts[0], (_split_operands(parts[1]) if len(parts) > 1 else [])


def _msb(expr, width):
    return Extract(width - 1, width - 1, expr)


def _zext1(expr):
    return Concat(VecConst(0, 1), expr)


def _replicate(expr, count):
    out = expr
    for _ in range(count - 1):
        out = Concat(out, expr)
    return out


def _imm_expr(value: int, width: int):
    return VecConst(value & ((1 << width) - 1), width)


def _src_expr(b: _Builder, op, width, temp="t0"):
    """Expression for a source operand, loading memory into a temp first."""
    if isinstance(op, RegOperand):
        if op.width != width:
            raise LiftError(f"operand width mismatch: {op.name} is {op.width}-bit, need {width}")
        b.read_reg(op.name)
        return Var(op.name)
    if isinstance(op, ImmOperand):
        return _imm_expr(op.value, width)
    ref = _sized(op.ref, width // 8)
    for r in _mem_regs(ref):
        b.read_reg(r)
    b.mem_reads.append(ref)
    b.emit(Load(temp, ref))
    b.writes_full.append(temp)
    return Var(temp)


def _sized(ref: MemRef, size: int) -> MemRef:
    if ref.size == 0:
        return MemRef(ref.base, ref.index, ref.scale, ref.disp, size)
    if ref.size != size:
        raise LiftError(f"memory operand sized {ref.size} bytes where {size} expected")
    return ref


def _operand_width(ops) -> int:
    for op in ops:
        if isinstance(op, RegOperand):
            return op.width
    for op in ops:
        if isinstance(op, MemOperand) and op.ref.size:
            return op.ref.size * 8
    raise LiftError("cannot infer operand width (add a byte/word/dword size prefix)")


def _emit_flags_logic(b: _Builder, res, width):
    # logic ops clear cf/of and set zf/sf from the result
    b.emit(Assign("zf", BinOp("==", res, VecConst(0, width))))
    b.emit(Assign("sf", _msb(res, width)))
    b.emit(Assign("cf", BitConst(0)))
    b.emit(Assign("of", BitConst(0)))
    b.writes_full += ["zf", "sf", "cf", "of"]


def _emit_flags_addsub(b: _Builder, kind, a, bb, res, width):
    if kind == "add":
        wide = BinOp("+", _zext1(a), _zext1(bb))
        b.emit(Assign("cf", Extract(width, width, wide)))
        ov = BinOp("&", Not(BinOp("^", _msb(a, width), _msb(bb, width))),
                   BinOp("^", _msb(a, width), _msb(res, width)))
    else:  # sub / cmp / neg
        b.emit(Assign("cf", BinOp("<", a, bb)))
        ov = BinOp("&", BinOp("^", _msb(a, width), _msb(bb, width)),
                   BinOp("^", _msb(a, width), _msb(res, width)))
    b.emit(Assign("of", ov))
    b.emit(Assign("zf", BinOp("==", res, VecConst(0, width))))
    b.emit(Assign("sf", _msb(res, width)))
    b.writes_full += ["cf", "of", "zf", "sf"]


def _dst_commit(b: _Builder, dst, expr, width, main=True):
    """Commit a result to a register or memory destination."""
    if isinstance(dst, RegOperand):
        b.emit(Assign(dst.name, expr), main=main, show=main)
        b.write_reg(dst.name)
    else:
        ref = _sized(dst.ref, width // 8)
        for r in _mem_regs(ref):
            b.read_reg(r)
        b.mem_writes.append(ref)
        b.emit(Store(ref, expr), main=main, show=main)


@lru_cache(maxsize=None)
def _lift_text(text: str) -> LiftedTemplate:
    mnem, ops = parse_instruction(text)
    b = _Builder(text)

    if mnem == "jmp" or (mnem.startswith("j") and mnem[1:] in _CC_EXPRS):
        if len(ops) != 1 or not isinstance(ops[0], ImmOperand):
            raise LiftError(f"{mnem} expects one immediate target")
        if mnem == "jmp":
            b.branch = BranchSpec(None, ops[0].value & 0xFFFFFFFF, "jmp")
        else:
            cc = mnem[1:]
            b.branch = BranchSpec(_CC_EXPRS[cc], ops[0].value & 0xFFFFFFFF, cc)
            b.reads += ["zf", "cf", "sf", "of"]
        return b.done()

    if mnem.startswith("cmov") and mnem[4:] in _CC_EXPRS:
        if len(ops) != 2 or not isinstance(ops[0], RegOperand):
            raise LiftError("cmov expects a register destination")
        width = ops[0].width
        src = _src_expr(b, ops[1], width)
        b.read_reg(ops[0].name)
        b.reads += ["zf", "cf", "sf", "of"]
        b.emit(Assign(ops[0].name, Cond(_CC_EXPRS[mnem[4:]], src, Var(ops[0].name))),
               main=True, show=True)
        b.write_reg(ops[0].name)
        return b.done()

    if mnem == "mov":
        if len(ops) != 2:
            raise LiftError("mov expects two operands")
        dst, src = ops
        if isinstance(dst, RegOperand) and isinstance(src, MemOperand):
            ref = _sized(src.ref, dst.width // 8)
            for r in _mem_regs(ref):
                b.read_reg(r)
            b.mem_reads.append(ref)
            b.emit(Load(dst.name, ref), main=True, show=True)
            b.write_reg(dst.name)
        elif isinstance(dst, RegOperand):
            width = dst.width
            expr = _src_expr(b, src, width)
            b.emit(Assign(dst.name, expr), main=True, show=True)
            b.write_reg(dst.name)
        elif isinstance(dst, MemOperand):
            if isinstance(src, RegOperand):
                width = src.width
            elif dst.ref.size:
                width = dst.ref.size * 8
            else:
                raise LiftError("store of an immediate needs a size prefix")
            expr = _src_expr(b, src, width)
            _dst_commit(b, dst, expr, width)
        else:
            raise LiftError("unsupported mov form")
        return b.done()

    if mnem in ("movzx", "movsx"):
        if len(ops) != 2 or not isinstance(ops[0], RegOperand):
            raise LiftError(f"{mnem} expects a register destination")
        dstw = ops[0].width
        if isinstance(ops[1], RegOperand):
            srcw = ops[1].width
        elif isinstance(ops[1], MemOperand) and ops[1].ref.size:
            srcw = ops[1].ref.size * 8
        else:
            raise LiftError(f"{mnem} memory source needs a size prefix")
        if srcw >= dstw:
            raise LiftError(f"{mnem} source must be narrower than destination")
        src = _src_expr(b, ops[1], srcw)
        if mnem == "movzx":
            expr = Concat(VecConst(0, dstw - srcw), src)
        else:
            expr = Concat(_replicate(_msb(src, srcw), dstw - srcw), src)
        b.emit(Assign(ops[0].name, expr), main=True, show=True)
        b.write_reg(ops[0].name)
        return b.done()

    if mnem == "lea":
        if len(ops) != 2 or not isinstance(ops[0], RegOperand) or not isinstance(ops[1], MemOperand):
            raise LiftError("lea expects 'lea reg, [mem]'")
        ref = ops[1].ref
        for r in _mem_regs(ref):
            b.read_reg(r)
        b.emit(Assign(ops[0].name, ref.addr_expr()), main=True, show=True)
        b.write_reg(ops[0].name)
        return b.done()

    if mnem in ("and", "or", "xor", "add", "sub"):
        if len(ops) != 2:
            raise LiftError(f"{mnem} expects two operands")
        width = _operand_width(ops)
        op_char = {"and": "&", "or": "|", "xor": "^", "add": "+", "sub": "-"}[mnem]
        a = _src_expr(b, ops[0], width, temp="t0")
        bb = _src_expr(b, ops[1], width, temp="t1")
        res = BinOp(op_char, a, bb)
        _dst_commit(b, ops[0], res, width)
        if mnem in ("and", "or", "xor"):
            _emit_flags_logic(b, res, width)
        else:
            _emit_flags_addsub(b, mnem, a, bb, res, width)
        return b.done()

    if mnem in ("test", "cmp"):
        if len(ops) != 2:
            raise LiftError(f"{mnem} expects two operands")
        width = _operand_width(ops)
        a = _src_expr(b, ops[0], width, temp="t0")
        bb = _src_expr(b, ops[1], width, temp="t1")
        if mnem == "test":
            res = BinOp("&", a, bb)
            b.emit(Assign("t0", res), main=True, show=True)
            b.writes_full.append("t0")
            _emit_flags_logic(b, Var("t0"), width)
            b.show.append(len(b.stmts) - 4)  # zf assign
        else:
            res = BinOp("-", a, bb)
            _emit_flags_addsub(b, "sub", a, bb, res, width)
            b.show += [len(b.stmts) - 2, len(b.stmts) - 4]  # zf and cf assigns
        return b.done()

    if mnem in ("not", "neg"):
        if len(ops) != 1:
            raise LiftError(f"{mnem} expects one operand")
        width = _operand_width(ops)
        a = _src_expr(b, ops[0], width)
        if mnem == "not":
            res = Not(a)
            _dst_commit(b, ops[0], res, width)
        else:
            zero = VecConst(0, width)
            res = BinOp("-", zero, a)
            _dst_commit(b, ops[0], res, width)
            _emit_flags_addsub(b, "sub", zero, a, res, width)
        return b.done()

    if mnem in ("shl", "shr", "sar"):
        if len(ops) != 2:
            raise LiftError(f"{mnem} expects two operands")
        width = _operand_width(ops)
        a = _src_expr(b, ops[0], width)
        if isinstance(ops[1], ImmOperand):
            amount = ops[1].value & 0x1F
            res = _shift_expr(mnem, a, amount, width)
            if res is None:  # shift by zero leaves state and flags unchanged
                return b.done()
            _dst_commit(b, ops[0], res, width)
            cf = _shift_carry(mnem, a, amount, width)
        elif isinstance(ops[1], RegOperand) and ops[1].name == "cl":
            # amount must be statically known at the record; rejected otherwise
            b.read_reg("cl")
            b.emit(Assign("t1", ShiftByCl(mnem, a, width)), main=True)
            b.writes_full.append("t1")
            _dst_commit(b, ops[0], Var("t1"), width)
            res, cf = Var("t1"), BitConst(0)
        else:
            raise LiftError(f"{mnem} amount must be an immediate or cl")
        b.emit(Assign("zf", BinOp("==", res, VecConst(0, width))))
        b.emit(Assign("sf", _msb(res, width)))
        b.emit(Assign("cf", cf))
        b.emit(Assign("of", BitConst(0)))
        b.writes_full += ["zf", "sf", "cf", "of"]
        return b.done()

    if mnem == "mul":
        if len(ops) != 1:
            raise LiftError("mul expects one operand")
        width = _operand_width(ops)
        if width != 32:
            raise LiftError("only 32-bit mul is supported")
        src = _src_expr(b, ops[0], width)
        wide = BinOp("*", Concat(VecConst(0, 32), Var("eax")), Concat(VecConst(0, 32), src))
        b.read_reg("eax")
        lo = Extract(0, 31, wide)
        hi = Extract(32, 63, wide)
        b.emit(Assign("eax", lo), main=True, show=True)
        b.emit(Assign("edx", hi), main=True, show=True)
        b.writes_full += ["eax", "edx"]
        overflow = BinOp("!=", hi, VecConst(0, 32))
        b.emit(Assign("cf", overflow))
        b.emit(Assign("of", overflow))
        b.emit(Assign("zf", BinOp("==", lo, VecConst(0, 32))))
        b.emit(Assign("sf", _msb(lo, 32)))
        b.writes_full += ["cf", "of", "zf", "sf"]
        return b.done()

    if mnem == "imul":
        return _lift_imul(b, ops)

    if mnem == "div":
        if len(ops) != 1:
            raise LiftError("div expects one operand")
        width = _operand_width(ops)
        if width != 32:
            raise LiftError("only 32-bit div is supported")
        src = _src_expr(b, ops[0], width)
        b.read_reg("eax")
        b.read_reg("edx")
        dividend = Concat(Var("edx"), Var("eax"))
        divisor = Concat(VecConst(0, 32), src)
        quot = BinOp("/", dividend, divisor)
        rem = BinOp("-", dividend, BinOp("*", quot, divisor))
        qlo = Extract(0, 31, quot)
        b.emit(Assign("eax", qlo), main=True, show=True)
        b.emit(Assign("edx", Extract(0, 31, rem)), main=True, show=True)
        b.writes_full += ["eax", "edx"]
        b.emit(Assign("zf", BinOp("==", qlo, VecConst(0, 32))))
        b.emit(Assign("sf", _msb(qlo, 32)))
        b.emit(Assign("cf", BitConst(0)))
        b.emit(Assign("of", BitConst(0)))
        b.writes_full += ["zf", "sf", "cf", "of"]
        return b.done()

    if mnem == "push":
        if len(ops) != 1:
            raise LiftError("push expects one operand")
        expr = _src_expr(b, ops[0], 32)
        b.read_reg("esp")
        ref = MemRef("esp", None, 1, (-4) & 0xFFFFFFFF, 4)
        b.mem_writes.append(ref)
        b.emit(Store(ref, expr), main=True, show=False)
        b.emit(Assign("esp", BinOp("-", Var("esp"), VecConst(4, 32))))
        b.writes_full.append("esp")
        return b.done()

    if mnem == "pop":
        if len(ops) != 1 or not isinstance(ops[0], RegOperand) or ops[0].width != 32:
            raise LiftError("pop expects a 32-bit register")
        if ops[0].name == "esp":
            raise LiftError("pop esp is not supported")
        b.read_reg("esp")
        ref = MemRef("esp", None, 1, 0, 4)
        b.mem_reads.append(ref)
        b.emit(Load(ops[0].name, ref), main=True, show=True)
        b.write_reg(ops[0].name)
        b.emit(Assign("esp", BinOp("+", Var("esp"), VecConst(4, 32))))
        b.writes_full.append("esp")
        return b.done()

    raise LiftError(f"unsupported mnemonic {mnem!r}")


def _lift_imul(b: _Builder, ops):
    if not ops:
        raise LiftError("imul expects operands")
    if len(ops) == 1:
        width = _operand_width(ops)
        if width != 32:
            raise LiftError("only 32-bit imul is supported")
        src = _src_expr(b, ops[0], 32)
        b.read_reg("eax")
        wide = BinOp("*", Concat(_replicate(_msb(Var("eax"), 32), 32), Var("eax")),
                     Concat(_replicate(_msb(src, 32), 32), src))
        lo = Extract(0, 31, wide)
        hi = Extract(32, 63, wide)
        b.emit(Assign("eax", lo), main=True, show=True)
        b.emit(Assign("edx", hi), main=True, show=True)
        b.writes_full += ["eax", "edx"]
        overflow = BinOp("!=", hi, _replicate(_msb(lo, 32), 32))
        b.emit(Assign("cf", overflow))
        b.emit(Assign("of", overflow))
        b.emit(Assign("zf", BinOp("==", lo, VecConst(0, 32))))
        b.emit(Assign("sf", _msb(lo, 32)))
        b.writes_full += ["cf", "of", "zf", "sf"]
        return b.done()
    if len(ops) == 2:
        dst, src_op = ops
        if not isinstance(dst, RegOperand) or dst.width != 32:
            raise LiftError("imul destination must be a 32-bit register")
        b.read_reg(dst.name)
        a, bb = Var(dst.name), _src_expr(b, src_op, 32)
    elif len(ops) == 3:
        dst, src_op, imm = ops
        if not isinstance(dst, RegOperand) or not isinstance(imm, ImmOperand):
            raise LiftError("three-operand imul is 'imul reg, r/m, imm'")
        a, bb = _src_expr(b, src_op, 32), _imm_expr(imm.value, 32)
    else:
        raise LiftError("too many imul operands")
    wide = BinOp("*", Concat(_replicate(_msb(a, 32), 32), a),
                 Concat(_replicate(_msb(bb, 32), 32), bb))
    lo = Extract(0, 31, wide)
    b.emit(Assign(dst.name, lo), main=True, show=True)
    b.write_reg(dst.name)
    overflow = BinOp("!=", Extract(32, 63, wide), _replicate(_msb(lo, 32), 32))
    b.emit(Assign("cf", overflow))
    b.emit(Assign("of", overflow))
    b.emit(Assign("zf", BinOp("==", lo, VecConst(0, 32))))
    b.emit(Assign("sf", _msb(lo, 32)))
    b.writes_full += ["cf", "of", "zf", "sf"]
    return b.done()


def _shift_expr(mnem, src, amount, width):
    if amount == 0:
        return None
    if mnem == "shl":
        if amount >= width:
            return VecConst(0, width)
        return Concat(Extract(0, width - 1 - amount, src), VecConst(0, amount))
    if mnem == "shr":
        if amount >= width:
            return VecConst(0, width)
        return Concat(VecConst(0, amount), Extract(amount, width - 1, src))
    # sar
    amount = min(amount, width - 1)
    sign = _msb(src, width)
    return Concat(_replicate(sign, amount), Extract(amount, width - 1, src))


def _shift_carry(mnem, src, amount, width):
    """Last bit shifted out (mirrors the concrete two's-complement semantics)."""
    if amount == 0:
        return BitConst(0)
    if mnem == "shl":
        pos = width - amount
        return Extract(pos, pos, src) if 0 <= pos < width else BitConst(0)
    if mnem == "shr":
        return Extract(amount - 1, amount - 1, src) if amount <= width else BitConst(0)
    pos = min(amount, width) - 1  # sar: shifted-out bits replicate the sign
    return Extract(pos, pos, src)


@dataclass(frozen=True)
class ShiftByCl:
    """Placeholder expression for a shift whose amount sits in ``cl``.

    The amount must carry a full value predicate when the record executes;
    shifting by a statically unknown amount is rejected.
    """

    mnem: str
    src: object
    width: int


# ---------------------------------------------------------------------------
# Record execution (lift + type inference glue)
# ---------------------------------------------------------------------------


@dataclass
class RecordOutcome:
    mem: list  # MemAccess entries
    branch_cond: Optional[object]  # typed condition vector for a cond. jump
    branch: Optional[BranchSpec]
    rules: Optional[list]
    updates: Optional[list]
    diagnostics: list


def exec_record(template: LiftedTemplate, rec: TraceRecord, env: TypeEnv,
                verbose: bool = False) -> RecordOutcome:
    memo = {}
    diagnostics = []
    mem_log = []
    rules_main = [] if verbose else None
    updates = [] if verbose else None
    main = set(template.main_idx)
    show = set(template.show_idx)
    for i, stmt in enumerate(template.stmts):
        stmt = _resolve_cl(stmt, env, rec)
        R.exec_stmt(
            stmt, env, rec.regs, memo,
            rules_main if i in main else None,
            mem_log,
            updates if i in show else None,
            diagnostics,
        )
    cond_vec = None
    if template.branch is not None and template.branch.cond is not None:
        cond_vec = R.eval_expr(template.branch.cond, env, memo, None, diagnostics)
    return RecordOutcome(mem_log, cond_vec, template.branch, rules_main, updates, diagnostics)


def _resolve_cl(stmt, env, rec):
    """Instantiate a shift-by-cl statement using cl's statically known value."""
    if type(stmt) is Assign and type(stmt.expr) is ShiftByCl:
        sh = stmt.expr
        amount = env.get("cl").known_value()
        if amount is None:
            raise R.AnalysisError(
                f"seq {rec.seq}: unsupported secret shift (cl has no known value)"
            )
        expr = _shift_expr(sh.mnem, sh.src, amount & 0x1F, sh.width)
        if expr is None:
            expr = sh.src
        return Assign(stmt.dst, expr)
    return stmt


# ---------------------------------------------------------------------------
# Taint pre-pass
# ---------------------------------------------------------------------------


@dataclass
class TaintState:
    tainted_regs: set = field(default_factory=set)  # canonical names (whole registers/flags)
    tainted_bytes: set = field(default_factory=set)
    tainted_seqs: list = field(default_factory=list)

    def as_ranges(self):
        """View as (register, (lo, hi)) bit ranges; taint is whole-register."""
        return {(r, (0, 31) if r in GPRS else (0, 0)) for r in self.tainted_regs}


def taint_step(state: TaintState, template: LiftedTemplate, rec: TraceRecord,
               ann: AnnotationSet) -> bool:
    """Advance the taint state over one record; True if the record touches taint.

    Explicit flows only: destinations of instructions reading tainted
    sources become tainted; a full overwrite from clean sources clears the
    taint; partial (sub-register) writes never clear.  Constants never
    taint.  Conditional jumps consuming a tainted flag count as tainted.
    """
    for a in ann.at(rec.seq):
        if a.target[0] == "reg":
            state.tainted_regs.add(_canon(a.target[1]))
        else:
            for i in range(a.target[2]):
                state.tainted_bytes.add((a.target[1] + i) & 0xFFFFFFFF)

    src_tainted = any(r in state.tainted_regs for r in template.reads)
    if not src_tainted:
        for ref in template.mem_reads:
            addr = R.mem_concrete(ref, rec.regs)
            if any(((addr + i) & 0xFFFFFFFF) in state.tainted_bytes for i in range(ref.size)):
                src_tainted = True
                break

    touched = src_tainted
    for name in template.writes_full + template.writes_partial:
        if name in state.tainted_regs:
            touched = True
    write_bytes = []
    for ref in template.mem_writes:
        addr = R.mem_concrete(ref, rec.regs)
        write_bytes.extend(((addr + i) & 0xFFFFFFFF) for i in range(ref.size))
    if any(a in state.tainted_bytes for a in write_bytes):
        touched = True

    if src_tainted:
        for name in template.writes_full + template.writes_partial:
            state.tainted_regs.add(name)
        state.tainted_bytes.update(write_bytes)
    else:
        for name in template.writes_full:
            state.tainted_regs.discard(name)
        for a in write_bytes:
            state.tainted_bytes.discard(a)

    if touched:
        state.tainted_seqs.append(rec.seq)
    return touched


def taint_pass(trace, ann: AnnotationSet) -> TaintState:
    """Forward explicit-flow taint over the whole trace."""
    state = TaintState()
    for rec in trace:
        taint_step(state, lift(rec), rec, ann)
    return state
