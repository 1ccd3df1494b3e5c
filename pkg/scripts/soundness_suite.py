#!/usr/bin/env python3
"""Soundness experiment: detector verdicts vs the brute-force oracle.

Generates random programs, computes exact ground truth by enumerating every
secret/random assignment, analyzes the reference trace, and reports any
oracle-confirmed leak the detector missed.  Also tallies how often the
detector over-approximates (findings on programs the oracle calls clean).

Usage: python scripts/soundness_suite.py [count] [start-seed]
"""

import sys
import time

sys.path.insert(0, "src")

from bitline.layout import CacheGeometry
from bitline.oracle import analyze_program, compare, enumerate_leakage
from bitline.synth import gen_program


def main(argv):
    count = int(argv[0]) if argv else 200
    start = int(argv[1]) if len(argv) > 1 else 0
    g = CacheGeometry()
    t0 = time.time()
    tall = {"leaky": 0, "clean": 0, "fp": 0, "unsound": 0}
    for seed in range(start, start + count):
        prog, table = gen_program(seed)
        truth = enumerate_leakage(prog, g, table)
        report = analyze_program(prog, table, g)
        verdict = compare(report, truth)
        leaky = bool(truth.leaky_mem_sites or truth.leaky_branch_sites)
        tall["leaky" if leaky else "clean"] += 1
        if not leaky and report.findings:
            tall["fp"] += 1
        if not verdict.sound:
            tall["unsound"] += 1
            print(f"seed {seed}: FALSE NEGATIVES {verdict.false_negatives}")
            for _, text in prog.instructions:
                print(f"    {text}")
    dt = time.time() - t0
    print(f"{count} programs in {dt:.1f}s: {tall['leaky']} truly leaky, "
          f"{tall['clean']} clean ({tall['fp']} with conservative findings), "
          f"{tall['unsound']} unsound")
    return 1 if tall["unsound"] else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
