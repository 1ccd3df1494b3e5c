"""Synthetic inputs: random oracle programs and benchmark traces.

``gen_program`` builds small straight-line programs over the supported
instruction set with one enumerated secret byte and, optionally, an
enumerated random nibble, ending in memory and/or branch sinks.  The
generator stays inside the documented sound envelope of the type rules:

* random-derived values are single-use (an instruction reads at most one
  random-lineage operand, so masks can never cancel);
* random-derived values only flow through bitwise/shift operations, never
  through +, -, or multiplication (whole-vector arithmetic rules would
  over-claim uniformity for partially-random vectors);
* the enumerated random nibble is masked to its enumerated bits right after
  loading, so the analyzer's whole-byte randomness annotation never claims
  uniformity for fixed bits;
* a secret-indexed store is only ever the last memory access (the analyzer
  resolves addresses from one logged execution and would not see aliasing
  under a different secret).

``gen_trace`` emits a long well-formed trace that repeatedly runs a
secret-touching loop body, plus matching annotation and branch-table texts,
for throughput measurements.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .layout import BranchEntry, BranchTable
from .oracle import OracleProgram, OracleSlot

SECRET_BYTE = 0xBF000018
RANDOM_BYTE = 0xBF00001C
LOAD_TABLE = 0x08110000
STORE_TABLE = 0x08200000
PUBLIC_DATA = 0x09000000
CODE_BASE = 0x08048000


@dataclass
class GenConfig:
    secret_bits: int = 8
    random_nibble: bool = False  # 4 enumerated random bits
    alu_steps: tuple = (2, 8)
    want_load_sink: bool = True
    want_store_sink: bool = False
    want_branch_sink: bool = True
    branch_same_line: bool = False


def gen_program(seed: int, config: GenConfig = None):
    """One random program plus its branch table; deterministic per seed."""
    rng = random.Random(seed)
    if config is None:
        config = GenConfig(
            random_nibble=rng.random() < 0.5,
            want_load_sink=rng.random() < 0.8,
            want_store_sink=rng.random() < 0.25,
            want_branch_sink=rng.random() < 0.8,
            branch_same_line=rng.random() < 0.4,
        )
        if not (config.want_load_sink or config.want_store_sink or config.want_branch_sink):
            config.want_branch_sink = True

    instrs = []

    def emit(text):
        instrs.append((CODE_BASE + 4 * len(instrs), text))

    # Lineage sets are contagious and never cleared: over-marking only
    # restricts what the generator emits, never what is sound.
    secretish = {"ecx"}
    randomish = set()
    public = {"esi", "ebx", "edi"}

    emit("movzx ecx, byte [ebp+0x8]")  # secret byte
    if config.random_nibble:
        emit("movzx edx, byte [ebp+0xc]")
        emit("and edx, 0xf")  # only the enumerated bits are uniform
        randomish.add("edx")
    for reg in sorted(public):
        if rng.random() < 0.5:
            emit(f"mov {reg}, {rng.randrange(1 << 32):#x}")

    pool = ["eax", "ebx", "ecx", "esi", "edi"]
    if config.random_nibble:
        pool.append("edx")
    clean = lambda: [r for r in pool if r not in randomish]

    def mark(dst, *srcs):
        if any(s in secretish for s in srcs) or dst in secretish:
            secretish.add(dst)
        if any(s in randomish for s in srcs):
            randomish.add(dst)

    for _ in range(rng.randint(*config.alu_steps)):
        kind = rng.random()
        if kind < 0.45:
            # bitwise; at most one random-lineage operand per instruction
            op = rng.choice(("xor", "and", "or"))
            if rng.random() < 0.5:
                src = rng.choice(pool)
                if src in randomish:
                    others = [r for r in clean() if r != src]
                    if not others:
                        continue
                    dst = rng.choice(others)
                else:
                    dst = rng.choice(pool)
                emit(f"{op} {dst}, {src}")
                mark(dst, src, dst)
            else:
                dst = rng.choice(pool)
                emit(f"{op} {dst}, {rng.randrange(1 << 32):#x}")
        elif kind < 0.7:
            # +/-/imul never see random lineage (whole-vector rules would
            # over-claim uniformity for partially-random values)
            choices = clean()
            if not choices:
                continue
            dst = rng.choice(choices)
            if rng.random() < 0.5:
                src = rng.choice(choices)
                op = rng.choice(("add", "sub", "imul"))
                emit(f"{op} {dst}, {src}")
                mark(dst, src, dst)
            else:
                op = rng.choice(("add", "sub"))
                emit(f"{op} {dst}, {rng.randrange(1 << 16):#x}")
        else:
            dst = rng.choice(pool)
            emit(f"{rng.choice(('shl', 'shr', 'sar'))} {dst}, {rng.randint(1, 11):#x}")

    def interesting(prefer_secret=0.75):
        if secretish and rng.random() < prefer_secret:
            return rng.choice(sorted(secretish))
        return rng.choice(sorted(secretish | randomish | {"eax", "esi"}))

    if config.want_load_sink:
        sink_reg = interesting()
        shape = rng.random()
        if shape < 0.35:
            # offsets stay inside one aligned line: never truly leaky
            emit(f"and {sink_reg}, 0x3f")
            emit(f"mov bl, [{sink_reg}+{LOAD_TABLE:#x}]")
        elif shape < 0.7:
            emit(f"and {sink_reg}, 0xff")
            emit(f"mov bl, [{sink_reg}+{LOAD_TABLE:#x}]")
        else:
            emit(f"and {sink_reg}, 0x3f")
            emit(f"mov ebx, [{sink_reg}*4+{LOAD_TABLE:#x}]")
        mark("ebx", sink_reg)
    if config.want_store_sink:
        reg = rng.choice(sorted((secretish - randomish) | {"eax"}))
        emit(f"and {reg}, {'0x1f' if rng.random() < 0.5 else '0xff'}")
        emit(f"mov [{reg}+{STORE_TABLE:#x}], esi")

    table = BranchTable()
    if config.want_branch_sink:
        flag_reg = interesting()
        style = rng.random()
        if style < 0.6:
            emit(f"and {flag_reg}, 0xff")
            emit(f"cmp {flag_reg}, {rng.randrange(1, 0x100):#x}")
        elif style < 0.8:
            emit(f"and {flag_reg}, 0xff")
            emit(f"cmp {flag_reg}, {rng.randrange(0x100, 0x140):#x}")  # forced outcome
        else:
            emit(f"cmp {flag_reg}, {rng.randrange(1 << 32):#x}")
        cc = rng.choice(("e", "ne", "b", "ae", "a", "be", "l", "ge"))
        cond_addr = CODE_BASE + 4 * len(instrs)
        fall = cond_addr + 4
        if config.branch_same_line:
            # tiny bodies whose lines a shared tail covers entirely
            b, c = fall + 4, fall + 8
            common = (fall & ~0x3F, (((c - 1) | 0x3F) + 1))
            entry = BranchEntry(cond_addr, fall, b, c, common)
        else:
            b = fall + 0x40
            c = b + 0x40
            entry = BranchEntry(cond_addr, fall, b, c)
        emit(f"j{cc} {entry.b:#x}")
        table.add(entry)

    slots = [OracleSlot("secret", i, ("mem", SECRET_BYTE, i))
             for i in range(config.secret_bits)]
    if config.random_nibble:
        slots += [OracleSlot("random", i, ("mem", RANDOM_BYTE, i)) for i in range(4)]

    prog = OracleProgram(
        instructions=instrs,
        slots=slots,
        init_regs={"ebp": 0xBF000010, "esp": 0xBF000000,
                   "esi": rng.randrange(1 << 32), "edi": rng.randrange(1 << 32),
                   "ebx": rng.randrange(1 << 32)},
        init_mem={},
    )
    return prog, table


# ---------------------------------------------------------------------------
# Benchmark traces
# ---------------------------------------------------------------------------

_BENCH_SECRET = 0x5A3C96E7


def gen_trace(length: int, secret_value: int = _BENCH_SECRET):
    """Trace text of ``length`` records looping a secret-touching body.

    Returns (trace_text, annotation_text, branch_table_text).  The body
    reloads a secret dword, masks and offsets it, performs one
    secret-indexed byte load (a real SDMA site) and loops on a public
    counter.
    """
    if length > 10_000_000:
        raise ValueError("trace length capped at 1e7 records")
    base = CODE_BASE
    body = (
        (base + 0x00, "mov eax, [ebp+0x8]"),
        (base + 0x04, "and eax, 0xff"),
        (base + 0x08, "add eax, 0x40"),
        (base + 0x0C, "xor esi, eax"),
        (base + 0x10, f"mov dl, [eax+{LOAD_TABLE:#x}]"),
        (base + 0x14, "and edx, 0xff"),
        (base + 0x18, "add edi, 0x1"),
        (base + 0x1C, "test edi, edi"),
        (base + 0x20, f"jne {base:#x}"),
    )
    regs = {"eax": 0, "ebx": 0, "ecx": 0, "edx": 0,
            "esi": 0x11111111, "edi": 0, "ebp": 0xBF000010, "esp": 0xBF000000}
    secret_byte = secret_value & 0xFF
    lines = []
    seq = 0
    while seq < length:
        addr, text = body[seq % len(body)]
        lines.append(
            f"T {seq} {addr:#x} {text} | "
            f"eax={regs['eax']:#x} ebx={regs['ebx']:#x} ecx={regs['ecx']:#x} "
            f"edx={regs['edx']:#x} esi={regs['esi']:#x} edi={regs['edi']:#x} "
            f"ebp={regs['ebp']:#x} esp={regs['esp']:#x}"
        )
        step = seq % len(body)
        if step == 0:
            regs["eax"] = secret_value
        elif step == 1:
            regs["eax"] &= 0xFF
        elif step == 2:
            regs["eax"] = (regs["eax"] + 0x40) & 0xFFFFFFFF
        elif step == 3:
            regs["esi"] ^= regs["eax"]
        elif step == 4:
            regs["edx"] = (regs["edx"] & ~0xFF) | ((secret_byte * 7 + 3) & 0xFF)
        elif step == 5:
            regs["edx"] &= 0xFF
        elif step == 6:
            regs["edi"] = (regs["edi"] + 1) & 0xFFFFFFFF
        seq += 1
    trace_text = "\n".join(lines) + "\n"
    annot_text = f"SECRET mem {0xBF000018:#x} 4 @0\n"
    bc_text = f"BC {base + 0x20:#x} {base + 0x24:#x} {base + 0x40:#x} {base + 0x80:#x}\n"
    return trace_text, annot_text, bc_text
