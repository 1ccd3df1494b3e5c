"""Command-line driver.

Exit codes are a stable contract: 0 for a clean analysis, 1 for input
errors (with a diagnostic naming the file), 2 when findings exist.  The
JSON report is written whenever ``--report`` is given, findings or not.
"""

from __future__ import annotations

import argparse
import sys

from .detector import analyze, format_report
from .frontend import AnnotationSet, TraceError, LiftError, parse_annotations, parse_trace
from .layout import BranchTable, CacheGeometry, LayoutError, parse_branch_table
from .oracle import OracleError, analyze_program, compare, enumerate_leakage, parse_program
from .rules import AnalysisError
from .synth import gen_trace

EXIT_CLEAN = 0
EXIT_INPUT_ERROR = 1
EXIT_FINDINGS = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bitline",
        description="Trace-driven cache side-channel detector using bit-level security types.",
    )
    p.add_argument("--mode", choices=("analyze", "oracle-compare", "gen-trace"),
                   default="analyze")
    p.add_argument("--trace", help="trace file (input; output path for gen-trace)")
    p.add_argument("--annot", help="annotation file marking secrets and random factors")
    p.add_argument("--branch-table", help="branch layout file (BC entries)")
    p.add_argument("--cache-line-bits", type=int, default=6,
                   help="log2 of the cache line size in bytes (default 6)")
    p.add_argument("--unit-gap", type=int, default=32,
                   help="max byte gap between sites grouped into one leakage unit")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--verbose", action="store_true",
                   help="print the per-record inference log (types and applied rules)")
    p.add_argument("--length", type=int, default=10_000,
                   help="record count for gen-trace")
    return p


def _read(path: str, what: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise SystemExit(f"bitline: cannot read {what} {path!r}: {exc.strerror}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "gen-trace":
            return _run_gen(args)
        if args.mode == "oracle-compare":
            return _run_oracle(args)
        return _run_analyze(args)
    except (TraceError, LiftError, LayoutError, AnalysisError, OracleError) as exc:
        print(f"bitline: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_INPUT_ERROR
        raise


def _load_common(args):
    if not args.trace:
        raise SystemExit("bitline: --trace is required")
    geometry = CacheGeometry(args.cache_line_bits)
    if args.annot:
        annotations = parse_annotations(_read(args.annot, "annotation file"))
    else:
        annotations = AnnotationSet([])
        print("bitline: warning: no annotation file; nothing is marked secret",
              file=sys.stderr)
    if args.branch_table:
        table = parse_branch_table(_read(args.branch_table, "branch table"))
    else:
        table = BranchTable()
        print("bitline: warning: no branch table; secret-dependent branches "
              "will be reported as layout-unknown", file=sys.stderr)
    return geometry, annotations, table


def _run_analyze(args) -> int:
    geometry, annotations, table = _load_common(args)
    trace = parse_trace(_read(args.trace, "trace"))
    report = analyze(trace, annotations, table, geometry,
                     unit_gap=args.unit_gap, verbose=args.verbose)
    for d in report.diagnostics:
        print(f"bitline: warning: {d}", file=sys.stderr)
    sys.stdout.write(format_report(report, verbose=args.verbose))
    if args.report:
        report.write(args.report)
    return EXIT_FINDINGS if report.findings else EXIT_CLEAN


def _run_oracle(args) -> int:
    geometry, _, table = _load_common(args)
    prog = parse_program(_read(args.trace, "oracle program"))
    report = analyze_program(prog, table, geometry, verbose=args.verbose)
    truth = enumerate_leakage(prog, geometry, table)
    verdict = compare(report, truth)
    sys.stdout.write(format_report(report, verbose=args.verbose))
    print(f"oracle: leaky memory sites: {sorted(map(hex, truth.leaky_mem_sites))}")
    print(f"oracle: leaky branch sites: {sorted(map(hex, truth.leaky_branch_sites))}")
    if verdict.sound:
        print("verdict: sound (no oracle-confirmed site is missing)")
    else:
        for kind, site in verdict.false_negatives:
            print(f"verdict: FALSE NEGATIVE {kind} at {site:#x}")
    if args.report:
        report.write(args.report)
    return EXIT_CLEAN if verdict.sound else EXIT_FINDINGS


def _run_gen(args) -> int:
    if not args.trace:
        raise SystemExit("bitline: --trace names the output trace file in gen-trace mode")
    trace_text, annot_text, bc_text = gen_trace(args.length)
    with open(args.trace, "w") as fh:
        fh.write(trace_text)
    if args.annot:
        with open(args.annot, "w") as fh:
            fh.write(annot_text)
    if args.branch_table:
        with open(args.branch_table, "w") as fh:
            fh.write(bc_text)
    print(f"bitline: wrote {args.length} records to {args.trace}")
    return EXIT_CLEAN


if __name__ == "__main__":
    sys.exit(main())
