#!/usr/bin/env python3
"""Throughput experiment: analysis time vs trace length.

Generates synthetic secret-touching traces of increasing length, times the
full pipeline (parse, taint, type inference, detection) on each, and prints
a table with the per-record cost so linearity is easy to eyeball.

Usage: python scripts/bench_scaling.py [lengths...]
"""

import sys
import time

sys.path.insert(0, "src")

from bitline.detector import analyze
from bitline.frontend import parse_annotations, parse_trace
from bitline.layout import parse_branch_table
from bitline.synth import gen_trace


def main(argv):
    lengths = [int(a) for a in argv] or [10_000, 100_000, 1_000_000]
    print(f"{'records':>10} {'parse(s)':>9} {'analyze(s)':>11} "
          f"{'total(s)':>9} {'us/record':>10} {'findings':>9}")
    prev = None
    for n in lengths:
        trace_text, annot_text, bc_text = gen_trace(n)
        t0 = time.perf_counter()
        trace = parse_trace(trace_text)
        t1 = time.perf_counter()
        report = analyze(trace, parse_annotations(annot_text),
                         parse_branch_table(bc_text))
        t2 = time.perf_counter()
        total = t2 - t0
        row = (f"{n:>10} {t1 - t0:>9.2f} {t2 - t1:>11.2f} "
               f"{total:>9.2f} {total / n * 1e6:>10.1f} "
               f"{report.stats['findings']:>9}")
        if prev is not None:
            row += f"   x{total / prev:.1f} vs previous"
        prev = total
        print(row)


if __name__ == "__main__":
    main(sys.argv[1:])
