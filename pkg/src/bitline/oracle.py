"""Ground-truth leakage oracle: exhaustive concrete execution.

The oracle runs a small program concretely for every assignment of its
enumerated secret and random bits, records the cache lines each memory
instruction touches and the direction each conditional jump takes, and
derives ground truth independently of the type system:

* a memory site leaks when the multiset of its observations over all random
  assignments differs between two secrets (with no randomness this
  degenerates to "two secrets touch different lines");
* a branch site leaks when the direction multiset differs between two
  secrets and its branch bodies are distinguishable under the cache layout.

Comparing the multisets over randomness (rather than observations under one
fixed mask) models fresh-per-execution blinding: a perfectly masked access
pattern is a secret-independent distribution even though individual
executions differ.

Programs reuse the trace syntax plus ``SLOT``/``INIT`` lines::

    SLOT secret <bit-index> mem 0x<addr> <bitpos>
    SLOT random <bit-index> reg <name> <bitpos>
    INIT reg <name> 0x<value>
    INIT mem 0x<addr> 0x<byte>
    T <seq> 0x<addr> <mnemonic> <operands> | <snapshots, ignored on load>

The emulator in this module is a separate concrete implementation of the
instruction semantics; it never consults the type rules, so it can serve as
an independent check of them.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .frontend import (
    AnnotationSet, Annotation, ImmOperand, MemOperand, RegOperand,
    TraceRecord, is_supported_mnemonic, parse_instruction,
)
from .ir import REG_VIEWS
from .layout import BranchTable, CacheGeometry, distinguishable
from .rules import mem_concrete

MASK32 = 0xFFFFFFFF

# Documented, expected unsoundness windows of the type rules.  compare()
# results should be read together with this catalogue: a program matching
# one of these patterns is a known false negative, not a regression.
KNOWN_FALSE_NEGATIVE_PATTERNS = {
    "xor-mask-reuse": (
        "XOR with a random operand always yields a uniformly-random type, "
        "even when the same mask is applied twice and cancels: (k ^ r) ^ r "
        "is typed URA although it equals k. Reusing a blinding mask is not "
        "detected; the oracle flags such programs as false negatives."
    ),
}


class OracleError(Exception):
    pass


@dataclass(frozen=True)
class OracleSlot:
    kind: str  # "secret" or "random"
    bit_index: int
    target: tuple  # ("reg", name, bitpos) or ("mem", addr, bitpos)


@dataclass
class OracleProgram:
    """A small concrete program with enumerable secret/random bit slots."""

    instructions: list  # (addr, text) in listing order
    slots: list = field(default_factory=list)
    init_regs: dict = field(default_factory=dict)
    init_mem: dict = field(default_factory=dict)

    @property
    def secret_bits(self) -> int:
        return sum(1 for s in self.slots if s.kind == "secret")

    @property
    def random_bits(self) -> int:
        return sum(1 for s in self.slots if s.kind == "random")

    def annotations(self) -> AnnotationSet:
        """Derive analyzer annotations from the slot targets (whole bytes/registers)."""
        entries = []
        seen = set()
        for s in self.slots:
            kind = "SECRET" if s.kind == "secret" else "RANDOM"
            if s.target[0] == "reg":
                key = (kind, "reg", s.target[1])
                tgt = ("reg", s.target[1])
            else:
                key = (kind, "mem", s.target[1])
                tgt = ("mem", s.target[1], 1)
            if key not in seen:
                seen.add(key)
                entries.append(Annotation(kind, tgt, 0))
        return AnnotationSet(entries)


def parse_program(text: str) -> OracleProgram:
    prog = OracleProgram([])
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "T":
                addr = int(parts[2], 16)
                body = line.split(None, 3)[3]
                insn = body.partition("|")[0].strip()
                mnem = insn.split(None, 1)[0]
                if not is_supported_mnemonic(mnem):
                    raise ValueError(f"unknown mnemonic {mnem!r}")
                prog.instructions.append((addr, " ".join(insn.split())))
            elif parts[0] == "SLOT":
                kind = parts[1]
                if kind not in ("secret", "random"):
                    raise ValueError(f"bad slot kind {kind!r}")
                idx = int(parts[2], 10)
                if parts[3] == "reg":
                    target = ("reg", parts[4], int(parts[5], 10))
                elif parts[3] == "mem":
                    target = ("mem", int(parts[4], 16), int(parts[5], 10))
                else:
                    raise ValueError("slot target must be reg or mem")
                prog.slots.append(OracleSlot(kind, idx, target))
            elif parts[0] == "INIT":
                if parts[1] == "reg":
                    prog.init_regs[parts[2]] = int(parts[3], 16) & MASK32
                elif parts[1] == "mem":
                    prog.init_mem[int(parts[2], 16)] = int(parts[3], 16) & 0xFF
                else:
                    raise ValueError("INIT target must be reg or mem")
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise OracleError(f"program line {lineno}: {exc}") from exc
    if not prog.instructions:
        raise OracleError("program has no instructions")
    return prog


def serialize_program(prog: OracleProgram) -> str:
    out = []
    for r in prog.init_regs:
        out.append(f"INIT reg {r} {prog.init_regs[r]:#x}")
    for a in sorted(prog.init_mem):
        out.append(f"INIT mem {a:#x} {prog.init_mem[a]:#x}")
    for s in prog.slots:
        if s.target[0] == "reg":
            out.append(f"SLOT {s.kind} {s.bit_index} reg {s.target[1]} {s.target[2]}")
        else:
            out.append(f"SLOT {s.kind} {s.bit_index} mem {s.target[1]:#x} {s.target[2]}")
    zero = " ".join(f"{n}=0x0" for n in
                    ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp"))
    for i, (addr, text) in enumerate(prog.instructions):
        out.append(f"T {i} {addr:#x} {text} | {zero}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Concrete emulation
# ---------------------------------------------------------------------------


def default_memory_byte(addr: int) -> int:
    """Fixed public contents for never-written memory (same for every run)."""
    return ((addr & MASK32) * 2654435761 >> 13) & 0xFF


_REG_ORDER = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp")


def _sval(x: int, width: int) -> int:
    return x - (1 << width) if x & (1 << (width - 1)) else x


def _cc_holds(cc: str, f: dict) -> bool:
    zf, cf, sf, of = f["zf"], f["cf"], f["sf"], f["of"]
    if cc in ("e", "z"):
        return bool(zf)
    if cc in ("ne", "nz"):
        return not zf
    if cc in ("b", "c", "nae"):
        return bool(cf)
    if cc in ("ae", "nb", "nc"):
        return not cf
    if cc in ("a", "nbe"):
        return not cf and not zf
    if cc in ("be", "na"):
        return bool(cf or zf)
    if cc in ("l", "nge"):
        return bool(sf ^ of)
    if cc in ("ge", "nl"):
        return not (sf ^ of)
    if cc in ("g", "nle"):
        return not zf and not (sf ^ of)
    if cc in ("le", "ng"):
        return bool(zf or (sf ^ of))
    if cc == "s":
        return bool(sf)
    if cc == "ns":
        return not sf
    raise OracleError(f"unknown condition code {cc!r}")


@dataclass
class RunResult:
    mem_obs: dict  # site addr -> tuple of cache-line indices touched
    branch_obs: dict  # site addr -> tuple of taken directions
    regs: dict
    mem: dict
    flags: dict
    trace: Optional[list] = None  # TraceRecord list when logging
    var_probe: Optional[int] = None


class Emulator:
    """Concrete executor for oracle programs (independent of the type rules)."""

    def __init__(self, program: OracleProgram, geometry: CacheGeometry = CacheGeometry(),
                 step_budget: int = 10_000):
        self.program = program
        self.geometry = geometry
        self.step_budget = step_budget
        self.listing = {}
        self.next_addr = {}
        addrs = [a for a, _ in program.instructions]
        for i, (addr, text) in enumerate(program.instructions):
            if addr in self.listing:
                raise OracleError(f"duplicate instruction address {addr:#x}")
            self.listing[addr] = parse_instruction(text)
            self.next_addr[addr] = addrs[i + 1] if i + 1 < len(addrs) else None
        self.texts = dict(program.instructions)
        self.entry = addrs[0]

    # -- state helpers ------------------------------------------------------

    def _initial_state(self, secret: int, rand: int):
        regs = {n: 0 for n in _REG_ORDER}
        regs["esp"] = 0xBF000000
        regs["ebp"] = 0xBF000010
        regs.update(self.program.init_regs)
        mem = dict(self.program.init_mem)
        for slot in self.program.slots:
            bit = (secret if slot.kind == "secret" else rand) >> slot.bit_index & 1
            if slot.target[0] == "reg":
                name, pos = slot.target[1], slot.target[2]
                parent, lo, _ = REG_VIEWS[name]
                pos += lo
                regs[parent] = (regs[parent] & ~(1 << pos)) | (bit << pos)
            else:
                addr, pos = slot.target[1], slot.target[2]
                old = mem.get(addr, default_memory_byte(addr))
                mem[addr] = (old & ~(1 << pos)) | (bit << pos)
        flags = {"zf": 0, "cf": 0, "sf": 0, "of": 0}
        return regs, mem, flags

    def _read_byte(self, mem, addr):
        addr &= MASK32
        if addr in mem:
            return mem[addr]
        return default_memory_byte(addr)

    def _read_mem(self, mem, addr, size):
        return sum(self._read_byte(mem, addr + i) << (8 * i) for i in range(size))

    def _write_mem(self, mem, addr, size, value):
        for i in range(size):
            mem[(addr + i) & MASK32] = (value >> (8 * i)) & 0xFF

    @staticmethod
    def _read_reg(regs, name):
        parent, lo, width = REG_VIEWS[name]
        return (regs[parent] >> lo) & ((1 << width) - 1)

    @staticmethod
    def _write_reg(regs, name, value):
        parent, lo, width = REG_VIEWS[name]
        mask = ((1 << width) - 1) << lo
        regs[parent] = (regs[parent] & ~mask) | ((value << lo) & mask)

    # -- execution ----------------------------------------------------------

    def run(self, secret: int = 0, rand: int = 0, log_trace: bool = False,
            probe=None) -> RunResult:
        """Execute once; optionally log a trace or probe a variable.

        ``probe`` is ``(record_index, ("reg", name) | ("mem", addr))``; the
        probed value is sampled right after that record executes.
        """
        regs, mem, flags = self._initial_state(secret, rand)
        mem_obs = {}
        branch_obs = {}
        trace = [] if log_trace else None
        probe_value = None
        pc = self.entry
        steps = 0
        count = 0
        while pc is not None:
            steps += 1
            if steps > self.step_budget:
                raise OracleError(f"step budget exceeded ({self.step_budget})")
            if pc not in self.listing:
                break  # jumped past the listing: program ends
            mnem, ops = self.listing[pc]
            if trace is not None:
                trace.append(TraceRecord(len(trace), pc, self.texts[pc], dict(regs)))
            next_pc = self.next_addr[pc]
            taken_target = self._step(pc, mnem, ops, regs, mem, flags, mem_obs, branch_obs)
            if taken_target is not None:
                next_pc = taken_target if taken_target != _FALLTHROUGH else next_pc
            if probe is not None and count == probe[0]:
                what = probe[1]
                if what[0] == "reg":
                    probe_value = self._read_reg(regs, what[1])
                else:
                    probe_value = self._read_byte(mem, what[1])
            count += 1
            pc = next_pc
        return RunResult(
            {k: tuple(v) for k, v in mem_obs.items()},
            {k: tuple(v) for k, v in branch_obs.items()},
            regs, mem, flags, trace, probe_value,
        )

    def _observe_mem(self, mem_obs, site, addr):
        mem_obs.setdefault(site, []).append(addr >> self.geometry.line_bits)

    def _step(self, pc, mnem, ops, regs, mem, flags, mem_obs, branch_obs):
        def src_value(op, width):
            if isinstance(op, RegOperand):
                return self._read_reg(regs, op.name)
            if isinstance(op, ImmOperand):
                return op.value & ((1 << width) - 1)
            ref = op.ref
            size = ref.size or width // 8
            addr = mem_concrete(ref, regs)
            self._observe_mem(mem_obs, pc, addr)
            return self._read_mem(mem, addr, size)

        def dst_commit(op, width, value):
            value &= (1 << width) - 1
            if isinstance(op, RegOperand):
                self._write_reg(regs, op.name, value)
            else:
                ref = op.ref
                size = ref.size or width // 8
                addr = mem_concrete(ref, regs)
                self._observe_mem(mem_obs, pc, addr)
                self._write_mem(mem, addr, size, value)

        def op_width(operands):
            for op in operands:
                if isinstance(op, RegOperand):
                    return REG_VIEWS[op.name][2]
            for op in operands:
                if isinstance(op, MemOperand) and op.ref.size:
                    return op.ref.size * 8
            raise OracleError("cannot infer width")

        if mnem == "jmp":
            return ops[0].value & MASK32
        if mnem.startswith("j") and not mnem.startswith("jmp"):
            cc = mnem[1:]
            taken = _cc_holds(cc, flags)
            branch_obs.setdefault(pc, []).append(taken)
            return (ops[0].value & MASK32) if taken else _FALLTHROUGH
        if mnem.startswith("cmov"):
            cc = mnem[4:]
            width = REG_VIEWS[ops[0].name][2]
            val = src_value(ops[1], width)
            if _cc_holds(cc, flags):
                self._write_reg(regs, ops[0].name, val)
            return None

        if mnem == "mov":
            width = op_width(ops)
            dst_commit(ops[0], width, src_value(ops[1], width))
            return None
        if mnem in ("movzx", "movsx"):
            dstw = REG_VIEWS[ops[0].name][2]
            if isinstance(ops[1], RegOperand):
                srcw = REG_VIEWS[ops[1].name][2]
            else:
                srcw = ops[1].ref.size * 8
            val = src_value(ops[1], srcw)
            if mnem == "movsx" and val & (1 << (srcw - 1)):
                val |= ((1 << (dstw - srcw)) - 1) << srcw
            self._write_reg(regs, ops[0].name, val)
            return None
        if mnem == "lea":
            self._write_reg(regs, ops[0].name, mem_concrete(ops[1].ref, regs))
            return None

        if mnem in ("and", "or", "xor", "test"):
            width = op_width(ops)
            a = src_value(ops[0], width)
            bv = src_value(ops[1], width)
            res = a & bv if mnem in ("and", "test") else (a | bv if mnem == "or" else a ^ bv)
            if mnem != "test":
                dst_commit(ops[0], width, res)
            flags.update(zf=int(res == 0), sf=(res >> (width - 1)) & 1, cf=0, of=0)
            return None
        if mnem in ("add", "sub", "cmp"):
            width = op_width(ops)
            mask = (1 << width) - 1
            a = src_value(ops[0], width)
            bv = src_value(ops[1], width)
            if mnem == "add":
                s = a + bv
                res = s & mask
                flags["cf"] = (s >> width) & 1
                flags["of"] = (((~(a ^ bv)) & (a ^ res)) >> (width - 1)) & 1
            else:
                res = (a - bv) & mask
                flags["cf"] = int(a < bv)
                flags["of"] = (((a ^ bv) & (a ^ res)) >> (width - 1)) & 1
            flags["zf"] = int(res == 0)
            flags["sf"] = (res >> (width - 1)) & 1
            if mnem != "cmp":
                dst_commit(ops[0], width, res)
            return None
        if mnem == "not":
            width = op_width(ops)
            dst_commit(ops[0], width, ~src_value(ops[0], width))
            return None
        if mnem == "neg":
            width = op_width(ops)
            mask = (1 << width) - 1
            a = src_value(ops[0], width)
            res = (-a) & mask
            flags.update(
                cf=int(a != 0), zf=int(res == 0), sf=(res >> (width - 1)) & 1,
                of=(((0 ^ a) & (0 ^ res)) >> (width - 1)) & 1,
            )
            dst_commit(ops[0], width, res)
            return None
        if mnem in ("shl", "shr", "sar"):
            width = op_width(ops)
            mask = (1 << width) - 1
            a = src_value(ops[0], width)
            if isinstance(ops[1], ImmOperand):
                amount = ops[1].value & 0x1F
                by_cl = False
            else:
                amount = self._read_reg(regs, "cl") & 0x1F
                by_cl = True
            if amount == 0:
                return None
            if mnem == "shl":
                res = (a << amount) & mask
                cf = (a >> (width - amount)) & 1 if amount <= width else 0
            elif mnem == "shr":
                res = a >> amount
                cf = (a >> (amount - 1)) & 1 if amount <= width else 0
            else:
                res = (_sval(a, width) >> amount) & mask
                cf = (_sval(a, width) >> (amount - 1)) & 1
            # cl-shift flags are pinned to cf=of=0 (the typed lifter matches)
            flags.update(
                zf=int(res == 0), sf=(res >> (width - 1)) & 1,
                cf=0 if by_cl else cf, of=0,
            )
            dst_commit(ops[0], width, res)
            return None
        if mnem == "mul":
            src = src_value(ops[0], 32)
            wide = regs["eax"] * src
            lo, hi = wide & MASK32, (wide >> 32) & MASK32
            regs["eax"], regs["edx"] = lo, hi
            flags.update(cf=int(hi != 0), of=int(hi != 0),
                         zf=int(lo == 0), sf=(lo >> 31) & 1)
            return None
        if mnem == "imul":
            if len(ops) == 1:
                p = _sval(regs["eax"], 32) * _sval(src_value(ops[0], 32), 32)
                lo, hi = p & MASK32, (p >> 32) & MASK32
                regs["eax"], regs["edx"] = lo, hi
                ovf = int(_sval(lo, 32) != p)
            else:
                if len(ops) == 2:
                    a, bv = _sval(self._read_reg(regs, ops[0].name), 32), \
                        _sval(src_value(ops[1], 32), 32)
                else:
                    a, bv = _sval(src_value(ops[1], 32), 32), _sval(ops[2].value & MASK32, 32)
                p = a * bv
                lo = p & MASK32
                self._write_reg(regs, ops[0].name, lo)
                ovf = int(_sval(lo, 32) != p)
            flags.update(cf=ovf, of=ovf, zf=int(lo == 0), sf=(lo >> 31) & 1)
            return None
        if mnem == "div":
            src = src_value(ops[0], 32)
            if src == 0:
                raise OracleError(f"division by zero at {pc:#x}")
            dividend = (regs["edx"] << 32) | regs["eax"]
            q, r = divmod(dividend, src)
            if q > MASK32:
                raise OracleError(f"divide overflow at {pc:#x}")
            regs["eax"], regs["edx"] = q, r
            flags.update(zf=int(q == 0), sf=(q >> 31) & 1, cf=0, of=0)
            return None
        if mnem == "push":
            val = src_value(ops[0], 32)
            addr = (regs["esp"] - 4) & MASK32
            self._observe_mem(mem_obs, pc, addr)
            self._write_mem(mem, addr, 4, val)
            regs["esp"] = addr
            return None
        if mnem == "pop":
            addr = regs["esp"]
            self._observe_mem(mem_obs, pc, addr)
            self._write_reg(regs, ops[0].name, self._read_mem(mem, addr, 4))
            regs["esp"] = (addr + 4) & MASK32
            return None
        raise OracleError(f"emulator does not support {mnem!r}")


_FALLTHROUGH = object()


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    leaky_mem_sites: set = field(default_factory=set)
    leaky_branch_sites: set = field(default_factory=set)
    nonuniform_vars: set = field(default_factory=set)


MAX_ASSIGNMENTS = 1 << 24


def enumerate_leakage(prog: OracleProgram, g: CacheGeometry, table: BranchTable,
                      step_budget: int = 10_000) -> GroundTruth:
    """Exact ground truth by enumerating every secret/random assignment."""
    nsec, nrand = prog.secret_bits, prog.random_bits
    if (1 << (nsec + nrand)) > MAX_ASSIGNMENTS:
        raise OracleError(
            f"{nsec}+{nrand} enumerated bits exceed the exact-enumeration bound"
        )
    emu = Emulator(prog, g, step_budget)
    mem_dists = {}  # secret -> {site: Counter of observation tuples}
    br_dists = {}
    for k in range(1 << nsec):
        mem_c = {}
        br_c = {}
        for r in range(1 << nrand):
            res = emu.run(k, r)
            for site, obs in res.mem_obs.items():
                mem_c.setdefault(site, Counter())[obs] += 1
            for site, obs in res.branch_obs.items():
                br_c.setdefault(site, Counter())[obs] += 1
        mem_dists[k] = mem_c
        br_dists[k] = br_c
    truth = GroundTruth()
    truth.leaky_mem_sites = _differing_sites(mem_dists)
    direction_leaks = _differing_sites(br_dists)
    for site in direction_leaks:
        entry = table.get(site)
        if entry is not None and distinguishable(entry, g):
            truth.leaky_branch_sites.add(site)
    return truth


def _differing_sites(dists: dict) -> set:
    """Sites whose observation distribution is not identical across secrets."""
    leaky = set()
    base = None
    for k, per_site in dists.items():
        if base is None:
            base = per_site
            continue
        for site in per_site.keys() | base.keys():
            if base.get(site) != per_site.get(site):
                leaky.add(site)
    return leaky


def check_uniform(prog: OracleProgram, var, at_seq: int,
                  step_budget: int = 10_000) -> bool:
    """True iff the variable's distribution over randomness is secret-independent.

    ``var`` is ``("reg", name)`` or ``("mem", addr)``; the value is sampled
    after the ``at_seq``-th executed record.
    """
    nsec, nrand = prog.secret_bits, prog.random_bits
    if (1 << (nsec + nrand)) > MAX_ASSIGNMENTS:
        raise OracleError("enumeration infeasible")
    emu = Emulator(prog, step_budget=step_budget)
    base = None
    for k in range(1 << nsec):
        dist = Counter()
        for r in range(1 << nrand):
            res = emu.run(k, r, probe=(at_seq, var))
            dist[res.var_probe] += 1
        if base is None:
            base = dist
        elif dist != base:
            return False
    return True


def reference_trace(prog: OracleProgram, secret: int = 0, rand: int = 0,
                    step_budget: int = 10_000) -> list:
    """Concrete trace of one reference execution, for the static analyzer."""
    emu = Emulator(prog, step_budget=step_budget)
    return emu.run(secret, rand, log_trace=True).trace


@dataclass
class Verdict:
    sound: bool
    false_negatives: list  # (kind, site_addr)


def compare(report, truth: GroundTruth) -> Verdict:
    """Sound iff every oracle-confirmed leaky site appears in the report."""
    from .detector import SDMA, SDBC

    sdma = report.sites(SDMA)
    sdbc = report.sites(SDBC)
    fn = []
    for site in sorted(truth.leaky_mem_sites):
        if site not in sdma:
            fn.append(("SDMA", site))
    for site in sorted(truth.leaky_branch_sites):
        if site not in sdbc:
            fn.append(("SDBC", site))
    return Verdict(not fn, fn)


def analyze_program(prog: OracleProgram, table: BranchTable,
                    g: CacheGeometry = CacheGeometry(), secret: int = 0,
                    rand: int = 0, verbose: bool = False):
    """Convenience: log a reference trace and run the static analyzer on it."""
    from .detector import analyze

    trace = reference_trace(prog, secret, rand)
    if not trace:
        raise OracleError("reference execution produced an empty trace")
    return analyze(trace, prog.annotations(), table, g, verbose=verbose)
