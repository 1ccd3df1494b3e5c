"""Leakage detection over a typed trace.

A memory access leaks (SDMA) when the bits of its address at and above the
cache-line index are secret-dependent: two secrets could then touch
different lines.  A conditional jump leaks (SDBC) when its condition is
secret-dependent, the condition is not statically forced to one outcome,
and the two branch bodies occupy distinguishable cache-line sets.  Jumps
with a secret condition but no branch-table entry are reported as
``SDBC-layout-unknown`` so missing layout inputs surface as warnings rather
than silence.

Findings are deduplicated per static site (a loop reports one site with a
hit counter) and grouped into units of adjacent addresses for reporting.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .ir import SDD, TypedBitvector, VecConst
from .layout import BranchTable, CacheGeometry, branch_lines, cache_line, distinguishable
from .rules import RuleTrace
from . import frontend as F

SDMA = "SDMA"
SDBC = "SDBC"
SDBC_LAYOUT_UNKNOWN = "SDBC-layout-unknown"

DEFAULT_UNIT_GAP = 32  # bytes; keeps a basic block's sites in one unit


@dataclass
class Finding:
    kind: str
    site_addr: int
    seq: int  # first trace record that triggered the finding
    evidence: str  # display of the offending typed vector
    lines: tuple = ()
    hits: int = 1

    def to_json(self):
        return {
            "kind": self.kind,
            "site_addr": f"{self.site_addr:#x}",
            "seq": self.seq,
            "evidence": self.evidence,
            "lines": [f"{l:#x}" for l in self.lines],
            "hits": self.hits,
        }


@dataclass
class LeakageUnit:
    member_addrs: tuple

    @property
    def representative(self) -> int:
        return self.member_addrs[0]

    def to_json(self):
        return {
            "representative": f"{self.representative:#x}",
            "members": [f"{a:#x}" for a in self.member_addrs],
        }


@dataclass
class Report:
    findings: list = field(default_factory=list)
    units: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    log: list = field(default_factory=list)  # RuleTrace entries when verbose
    diagnostics: list = field(default_factory=list)

    def sites(self, kind: str) -> set:
        return {f.site_addr for f in self.findings if f.kind == kind}

    def to_json(self) -> dict:
        return {
            "findings": [f.to_json() for f in self.findings],
            "units": [u.to_json() for u in self.units],
            "stats": self.stats,
        }

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


def check_sdma(addr_vec: TypedBitvector, g: CacheGeometry) -> bool:
    """True when the line-index bits (everything at or above L) are secret-dependent."""
    if addr_vec.width <= g.line_bits:
        return False
    shifted_planes = tuple(p >> g.line_bits for p in addr_vec.planes)
    return bool(shifted_planes[SDD])


def check_sdbc(flag: TypedBitvector, cond_addr: int, table: BranchTable,
               g: CacheGeometry):
    """Classify a conditional jump; returns a kind or None.

    A condition below SDD never leaks; a condition folded to a constant is a
    forced outcome and never leaks either (it is already not SDD).  For a
    secret condition the branch table decides: distinguishable line sets
    leak, identical ones are safe, and a missing entry is reported as
    layout-unknown.
    """
    if flag.vector_type() is not SDD:
        return None, ()
    entry = table.get(cond_addr)
    if entry is None:
        return SDBC_LAYOUT_UNKNOWN, ()
    if not distinguishable(entry, g):
        return None, ()
    l_if, l_else = branch_lines(entry, g)
    return SDBC, tuple(sorted(l_if | l_else))


def group_units(findings, gap: int = DEFAULT_UNIT_GAP) -> list:
    """Deduplicate by site and merge sites within ``gap`` bytes into units."""
    addrs = sorted({f.site_addr for f in findings})
    units = []
    cur = []
    for a in addrs:
        if cur and a - cur[-1] > gap:
            units.append(LeakageUnit(tuple(cur)))
            cur = []
        cur.append(a)
    if cur:
        units.append(LeakageUnit(tuple(cur)))
    return units


def analyze(trace, annotations: F.AnnotationSet, table: BranchTable,
            geometry: CacheGeometry = CacheGeometry(),
            unit_gap: int = DEFAULT_UNIT_GAP, verbose: bool = False) -> Report:
    """Run the full pipeline: taint, per-record typing, leak checks, grouping."""
    t0 = time.perf_counter()
    report = Report()
    taint = F.taint_pass(trace, annotations)
    env = F.build_initial_env(annotations)
    by_site = {}

    def record_finding(kind, site, seq, evidence, lines):
        key = (kind, site)
        found = by_site.get(key)
        if found is not None:
            found.hits += 1
            return
        f = Finding(kind, site, seq, evidence, lines)
        by_site[key] = f
        report.findings.append(f)

    max_ann = annotations.max_seq()
    for rec in trace:
        if 0 < rec.seq <= max_ann:
            F.apply_annotations(env, annotations, rec.seq)
        template = F.lift(rec)
        outcome = F.exec_record(template, rec, env, verbose=verbose)
        report.diagnostics.extend(
            f"seq {rec.seq} at {rec.addr:#x}: {d}" for d in outcome.diagnostics
        )
        entry = None
        if verbose:
            entry = RuleTrace(rec.seq, rec.addr, rec.text)
            entry.rules = list(outcome.rules or ())
            for const in _main_consts(template):
                entry.values.append((f"imm{len(entry.values)}",
                                     TypedBitvector.constant(const.value, const.width).display()))
            for name, vec in outcome.updates or ():
                entry.values.append((name, vec.display()))
            report.log.append(entry)
        for acc in outcome.mem:
            if check_sdma(acc.addr_vec, geometry):
                record_finding(SDMA, rec.addr, rec.seq, acc.addr_vec.display(),
                               (cache_line(acc.concrete, geometry),))
                if entry is not None:
                    entry.rules = list(acc.addr_rules)
                    entry.notes.append(
                        f"MA({rec.addr:x}) address {acc.addr_vec.display()} -> secret-dependent,"
                        f" c-line {cache_line(acc.concrete, geometry):#x}"
                    )
            elif entry is not None:
                entry.notes.append(
                    f"{acc.kind} address {acc.addr_vec.display()}"
                    f" c-line {cache_line(acc.concrete, geometry):#x}"
                )
        if outcome.branch is not None:
            br = outcome.branch
            if br.cond is None:
                if entry is not None:
                    entry.notes.append(f"BR({rec.addr:x},{br.target:x})")
            else:
                kind, lines = check_sdbc(outcome.branch_cond, rec.addr, table, geometry)
                if kind is not None:
                    record_finding(kind, rec.addr, rec.seq,
                                   outcome.branch_cond.display(), lines)
                if entry is not None:
                    entry.values.append(("cond", outcome.branch_cond.display()))
                    e = table.get(rec.addr)
                    if e is not None:
                        l_if, l_else = branch_lines(e, geometry)
                        entry.notes.append(
                            f"BC({e.a:x},{e.b:x},{e.c:x})"
                            f" true branch -> c-line {' '.join(f'{l:x}' for l in sorted(l_if))}"
                            f" false branch -> c-line {' '.join(f'{l:x}' for l in sorted(l_else))}"
                        )
                    if kind is not None:
                        entry.notes.append(f"condition -> secret-dependent ({kind})")

    report.units = group_units(report.findings, unit_gap)
    counts = {SDMA: 0, SDBC: 0, SDBC_LAYOUT_UNKNOWN: 0}
    for f in report.findings:
        counts[f.kind] += 1
    report.stats = {
        "sdma": counts[SDMA],
        "sdbc": counts[SDBC],
        "sdbc_layout_unknown": counts[SDBC_LAYOUT_UNKNOWN],
        "findings": len(report.findings),
        "units": len(report.units),
        "trace_records": len(trace),
        "tainted_records": len(taint.tainted_seqs),
        "elapsed_seconds": round(time.perf_counter() - t0, 6),
    }
    return report


def _main_consts(template):
    """Immediate constants appearing in the displayed statements, in order."""
    out = []

    def walk(e):
        t = type(e)
        if t is VecConst:
            out.append(e)
            return
        for attr in ("a", "b", "c", "e", "hi", "lo", "expr", "src"):
            sub = getattr(e, attr, None)
            if sub is not None and not isinstance(sub, (int, str)):
                walk(sub)

    for i in template.main_idx:
        walk(template.stmts[i])
    return out


def format_report(report: Report, verbose: bool = False) -> str:
    """Human-readable report; with ``verbose`` includes the inference log."""
    lines = []
    if verbose and report.log:
        lines.append("== inference log ==")
        for entry in report.log:
            vals = ", ".join(f"{n}={d}" for n, d in entry.values)
            rules = entry.rules_display
            row = f"[{entry.seq:>6}] {entry.addr:#010x}  {entry.asm:<32} {vals}"
            if rules:
                row += f"  | {rules}"
            lines.append(row)
            for note in entry.notes:
                lines.append(f"          {note}")
        lines.append("")
    lines.append("== findings ==")
    if not report.findings:
        lines.append("(none)")
    for f in report.findings:
        loc = f"{f.site_addr:#010x}"
        cl = " ".join(f"{l:#x}" for l in f.lines)
        lines.append(f"{f.kind:<20} site {loc}  seq {f.seq}  hits {f.hits}  {f.evidence}"
                     + (f"  lines [{cl}]" if f.lines else ""))
    lines.append("")
    lines.append("== units ==")
    for u in report.units:
        lines.append(f"unit @{u.representative:#010x}: "
                     + " ".join(f"{a:#x}" for a in u.member_addrs))
    lines.append("")
    lines.append("== stats ==")
    for k, v in report.stats.items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"
