import os

import pytest

from bitline.frontend import parse_annotations, parse_trace
from bitline.layout import parse_branch_table

DATA = os.path.join(os.path.dirname(__file__), "data")


def data_path(name):
    return os.path.join(DATA, name)


def read_data(name):
    with open(data_path(name)) as fh:
        return fh.read()


@pytest.fixture(scope="session")
def golden_trace():
    return parse_trace(read_data("bn_bits.trace"))


@pytest.fixture(scope="session")
def golden_annotations():
    return parse_annotations(read_data("bn_bits.annot"))


@pytest.fixture(scope="session")
def golden_branch_table():
    return parse_branch_table(read_data("bn_bits.bc"))


def trace_line(seq, addr, text, **regs):
    defaults = {"eax": 0, "ebx": 0, "ecx": 0, "edx": 0,
                "esi": 0, "edi": 0, "ebp": 0xBF000010, "esp": 0xBF000000}
    defaults.update(regs)
    snap = " ".join(f"{n}={defaults[n]:#x}"
                    for n in ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp"))
    return f"T {seq} {addr:#x} {text} | {snap}"


def make_trace(instrs, start=0x8048000, step=4, regs_per_seq=None):
    """Build a trace text from instruction strings; optional per-seq registers."""
    lines = []
    for i, text in enumerate(instrs):
        regs = (regs_per_seq or {}).get(i, {})
        lines.append(trace_line(i, start + step * i, text, **regs))
    return "\n".join(lines) + "\n"
