"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS lines.
"""

import time

import pytest

from conftest import make_trace, read_data

from bitline.detector import SDBC, SDMA, analyze
from bitline.frontend import (
    TaintState, build_initial_env, exec_record, lift, parse_annotations,
    parse_trace, taint_step,
)
from bitline.ir import SDD, URA, GPRS, FLAGS
from bitline.layout import BranchTable, CacheGeometry, parse_branch_table
from bitline.oracle import (
    KNOWN_FALSE_NEGATIVE_PATTERNS, OracleProgram, OracleSlot, analyze_program,
    compare, enumerate_leakage, reference_trace,
)
from bitline.synth import CODE_BASE, LOAD_TABLE, RANDOM_BYTE, SECRET_BYTE, gen_program, gen_trace

G = CacheGeometry()


def ok(msg):
    print(f"ACCEPTANCE PASS: {msg}")


# -- criterion 1: the golden sixteen-instruction trace -------------------------------

def test_criterion_1_golden_table(golden_trace, golden_annotations, golden_branch_table):
    t0 = time.perf_counter()
    report = analyze(golden_trace, golden_annotations, golden_branch_table, verbose=True)
    elapsed = time.perf_counter() - t0
    assert report.sites(SDBC) == {0x8049627, 0x8049633}
    assert report.sites(SDMA) == {0x804963B}
    assert len(report.findings) == 3 and len(report.units) == 1

    rows = {e.seq: e.rules_display for e in report.log}
    assert rows[1] == rows[5] == rows[11] == "Logic.I, Conj&Disj.I, Const-Conj.I&II"
    assert rows[2] == rows[6] == "Logic.I, Conj&Disj.I, Const-Conj.I"
    assert rows[9] == "Extraction, Concat.I"
    assert rows[10] == rows[12] == "Arith.I, Concat.I"

    branch_lines = set()
    for f in report.findings:
        if f.kind == SDBC:
            branch_lines.update(f.lines)
    assert branch_lines == {0x201258, 0x201259, 0x20125A}
    assert elapsed < 1.0
    ok(f"criterion 1: golden trace: 2 SDBC + 1 SDMA, rule rows and "
       f"cache lines match, {elapsed:.3f}s")


# -- criterion 2: switch-case suppression under equal line sets ----------------------

SWITCH_TRACE = make_trace([
    "mov eax, [ebp+0x8]",   # secret word count
    "and eax, 0x3",         # switch (count & 3)
    "test eax, eax",
    "je 0x8048014",
])
SWITCH_ANNOT = "SECRET mem 0xbf000018 4 @0\n"
# both bodies live inside lines a shared tail also covers
SAME_LINES_BC = "BC 0x804800c 0x8048010 0x8048014 0x8048018 COMMON 0x8048000 0x8048080\n"
# relocated: the taken body sits two lines away
DISTINCT_BC = "BC 0x804800c 0x8048010 0x8048080 0x80480c0\n"


def test_criterion_2_switch_layout_suppression():
    t0 = time.perf_counter()
    trace = parse_trace(SWITCH_TRACE)
    ann = parse_annotations(SWITCH_ANNOT)
    same = analyze(trace, ann, parse_branch_table(SAME_LINES_BC))
    assert same.findings == []
    moved = analyze(trace, ann, parse_branch_table(DISTINCT_BC))
    assert len(moved.sites(SDBC)) >= 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    ok("criterion 2: equal branch line sets suppress the finding; "
       "relocated branches restore it")


# -- criterion 3: known-bit comparison folding ----------------------------------------

def test_criterion_3_masked_comparison_true_negative():
    masked = make_trace([
        "mov eax, [ebp+0x8]",
        "and eax, 0x7",        # c = k & 7
        "cmp eax, 0x28",       # c > 40 can never hold
        "ja 0x8048060",
    ])
    unmasked = make_trace([
        "mov eax, [ebp+0x8]",
        "and eax, 0xffffffff",
        "cmp eax, 0x28",
        "ja 0x8048060",
    ])
    ann = parse_annotations("SECRET mem 0xbf000018 4 @0\n")
    bc = parse_branch_table("BC 0x804800c 0x8048010 0x8048060 0x80480a0\n")
    tn = analyze(parse_trace(masked), ann, bc)
    assert tn.findings == []
    tp = analyze(parse_trace(unmasked), ann, bc)
    assert tp.sites(SDBC) == {0x804800C}
    ok("criterion 3: masked compare folds to a constant flag (TN); "
       "unmasked variant is flagged (TP)")


# -- criterion 4: constant-time primitives have no findings ---------------------------

CT_PRIMITIVES = {
    # r = (mask & a) | (~mask & b) with mask = -(k & 1)
    "bitwise-select": [
        "mov eax, [ebp+0x8]",
        "and eax, 0x1",
        "neg eax",
        "mov ebx, 0x1234",
        "mov ecx, 0x5678",
        "and ebx, eax",
        "not eax",
        "and ecx, eax",
        "or ebx, ecx",
    ],
    # z = k ^ x; eq = ((z | -z) >> 31) ^ 1
    "ct-eq": [
        "mov eax, [ebp+0x8]",
        "xor eax, 0x1234",
        "mov ebx, eax",
        "neg ebx",
        "or eax, ebx",
        "shr eax, 0x1f",
        "xor eax, 0x1",
    ],
    # lt = msb of (x - y) mixed per the standard branchless trick
    "ct-lt": [
        "mov eax, [ebp+0x8]",
        "mov ebx, 0x1234",
        "mov ecx, eax",
        "sub ecx, ebx",
        "xor ebx, eax",
        "and ecx, ebx",
        "xor ecx, eax",
        "shr ecx, 0x1f",
    ],
    # both branch bodies execute; bitwise blend selects the result
    "always-execute-bitwise-select": [
        "mov eax, [ebp+0x8]",
        "mov ebx, eax",
        "add ebx, 0x10",      # then-branch result
        "mov ecx, eax",
        "shl ecx, 0x1",       # else-branch result
        "and eax, 0x1",
        "neg eax",
        "and ebx, eax",
        "not eax",
        "and ecx, eax",
        "or ebx, ecx",
    ],
    # every table entry is touched; masks accept exactly one
    "always-access-bitwise-select": [
        "mov eax, [ebp+0x8]",
        "and eax, 0x1",
        "neg eax",
        "mov ebx, [0x8110000]",
        "mov ecx, [0x8110040]",
        "and ebx, eax",
        "not eax",
        "and ecx, eax",
        "or ebx, ecx",
    ],
}


@pytest.mark.parametrize("name", sorted(CT_PRIMITIVES))
def test_criterion_4_constant_time_corpus(name):
    trace = parse_trace(make_trace(CT_PRIMITIVES[name]))
    ann = parse_annotations("SECRET mem 0xbf000018 4 @0\n")
    report = analyze(trace, ann, BranchTable())
    assert report.findings == [], f"{name} produced {report.findings}"
    ok(f"criterion 4: constant-time primitive {name!r}: no findings")


# -- criterion 5: blinding semantics ----------------------------------------------------

BLIND_ANNOT = "SECRET mem 0xbf000018 4 @0\nRANDOM reg ebx @0\nRANDOM reg ecx @0\n"


def test_criterion_5_blinding_contrast():
    masked = make_trace([
        "mov eax, [ebp+0x8]",
        "xor eax, ebx",              # fresh full-width mask
        "mov dl, [eax+0x8110000]",
    ])
    ann = parse_annotations(BLIND_ANNOT)
    rep = analyze(parse_trace(masked), ann, BranchTable(), verbose=True)
    assert rep.sites(SDMA) == set()
    note = next(n for e in rep.log if e.seq == 2 for n in e.notes)
    assert "{U}32:URA" in note  # the address value is typed uniformly random

    unmasked = make_trace([
        "mov eax, [ebp+0x8]",
        "mov dl, [eax+0x8110000]",
    ])
    rep2 = analyze(parse_trace(unmasked), ann, BranchTable())
    assert len(rep2.sites(SDMA)) == 1

    demoted = make_trace([
        "mov eax, ebx",
        "and eax, ecx",              # two uniform values: weakly random now
        "mov dl, [eax+0x8110000]",
    ])
    rep3 = analyze(parse_trace(demoted), ann, BranchTable(), verbose=True)
    assert rep3.sites(SDMA) == set()  # weakly random is still not secret-dependent
    note3 = next(n for e in rep3.log if e.seq == 2 for n in e.notes)
    assert "{W}32:WRA" in note3
    ok("criterion 5: xor blinding removes the SDMA, the unmasked variant keeps it, "
       "and demoted randomness shows as {W}32:WRA evidence")


# -- criterion 6: oracle soundness over random programs ----------------------------------

def test_criterion_6_soundness_suite():
    t0 = time.perf_counter()
    unsound = []
    truly_leaky = 0
    for seed in range(200):
        prog, table = gen_program(seed)
        assert len(prog.instructions) <= 30
        assert prog.secret_bits <= 8 and prog.random_bits <= 4
        truth = enumerate_leakage(prog, G, table)
        report = analyze_program(prog, table, G)
        verdict = compare(report, truth)
        if not verdict.sound:
            unsound.append((seed, verdict.false_negatives,
                            [t for _, t in prog.instructions]))
        if truth.leaky_mem_sites or truth.leaky_branch_sites:
            truly_leaky += 1
    elapsed = time.perf_counter() - t0
    assert not unsound, f"false negatives: {unsound[:3]}"
    assert truly_leaky >= 20  # the suite must exercise genuinely leaky programs
    assert elapsed < 300
    ok(f"criterion 6: 200 random programs sound ({truly_leaky} with real leaks), "
       f"{elapsed:.1f}s")


# -- criterion 7: the mask-reuse counterexample is catalogued ------------------------------

def test_criterion_7_mask_reuse_documented_gap():
    instrs = [
        "movzx ecx, byte [ebp+0x8]", "and ecx, 0xf",
        "movzx edx, byte [ebp+0xc]", "and edx, 0xf",
        "xor ecx, edx",
        "xor ecx, edx",              # same mask again: the secret is back
        "shl ecx, 0x6",
        f"mov bl, [ecx+{LOAD_TABLE:#x}]",
    ]
    slots = [OracleSlot("secret", i, ("mem", SECRET_BYTE, i)) for i in range(4)]
    slots += [OracleSlot("random", i, ("mem", RANDOM_BYTE, i)) for i in range(4)]
    prog = OracleProgram([(CODE_BASE + 4 * i, t) for i, t in enumerate(instrs)],
                         slots, {"ebp": 0xBF000010, "esp": 0xBF000000}, {})
    truth = enumerate_leakage(prog, G, BranchTable())
    site = CODE_BASE + 4 * 7
    assert truth.leaky_mem_sites == {site}
    verdict = compare(analyze_program(prog, BranchTable(), G), truth)
    assert not verdict.sound and verdict.false_negatives == [("SDMA", site)]
    # the gap must be documented, not silent
    entry = KNOWN_FALSE_NEGATIVE_PATTERNS.get("xor-mask-reuse", "")
    assert "(k ^ r) ^ r" in entry
    ok("criterion 7: mask reuse is an expected, catalogued false negative")


# -- criterion 8: scaling ---------------------------------------------------------------

def _timed_analysis(length):
    trace_text, annot_text, bc_text = gen_trace(length)
    t0 = time.perf_counter()
    report = analyze(parse_trace(trace_text), parse_annotations(annot_text),
                     parse_branch_table(bc_text))
    return time.perf_counter() - t0, report


def test_criterion_8_linear_scaling():
    lengths = (10_000, 100_000, 1_000_000)
    times = []
    for n in lengths:
        dt, report = _timed_analysis(n)
        assert report.stats["trace_records"] == n
        assert report.sites(SDMA)  # the loop body has a real leak
        times.append(dt)
    assert times[-1] <= 120, f"1e6 records took {times[-1]:.1f}s"
    for (n1, t1), (n2, t2) in zip(zip(lengths, times), zip(lengths[1:], times[1:])):
        length_ratio = n2 / n1
        time_ratio = t2 / t1
        assert length_ratio / 2 <= time_ratio <= length_ratio * 2, (
            f"{n1}->{n2}: time ratio {time_ratio:.1f} vs length ratio {length_ratio}")
    ok(f"criterion 8: scaling {[f'{t:.2f}s' for t in times]} for 1e4/1e5/1e6 records")


# -- criterion 9: taint containment -------------------------------------------------------

def _audit_containment(trace, annotations):
    """Every (seq, variable) typed SDD or URA must be in the taint set."""
    env = build_initial_env(annotations)
    taint = TaintState()
    hot = (SDD, URA)
    for rec in trace:
        if rec.seq > 0:
            for a in annotations.at(rec.seq):
                from bitline.ir import annotate
                annotate(env, a.target, a.level)
        template = lift(rec)
        taint_step(taint, template, rec, annotations)
        exec_record(template, rec, env)
        for name, vec in env.vars.items():
            if any(vec.planes[l] for l in hot):
                assert name in taint.tainted_regs, \
                    f"seq {rec.seq}: {name} typed {vec.display()} but untainted"
        for addr, byte in env.mem.items():
            if any(byte.planes[l] for l in hot):
                assert addr in taint.tainted_bytes, \
                    f"seq {rec.seq}: byte {addr:#x} typed {byte.display()} but untainted"


def test_criterion_9_taint_containment(golden_trace, golden_annotations):
    _audit_containment(golden_trace, golden_annotations)
    blinding = parse_trace(make_trace([
        "mov eax, [ebp+0x8]", "xor eax, ebx", "mov dl, [eax+0x8110000]",
        "mov [esp-0x4], edx", "pop esi",
    ]))
    _audit_containment(blinding, parse_annotations(BLIND_ANNOT))
    for seed in range(40):
        prog, _ = gen_program(seed)
        trace = reference_trace(prog, secret=0x5A, rand=0x9)
        _audit_containment(trace, prog.annotations())
    ok("criterion 9: every SDD/URA-typed variable is contained in the taint set "
       "on the golden, blinding, and generated traces")
