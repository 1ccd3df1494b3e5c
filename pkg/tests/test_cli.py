"""Command-line driver: exit codes, report artifact, generation mode."""

import json
import subprocess
import sys

import pytest

from conftest import data_path, make_trace

from bitline.cli import main


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_golden_exits_with_findings(capsys, tmp_path):
    report_path = tmp_path / "report.json"
    code, out, _ = run_cli([
        "--trace", data_path("bn_bits.trace"),
        "--annot", data_path("bn_bits.annot"),
        "--branch-table", data_path("bn_bits.bc"),
        "--report", str(report_path),
    ], capsys)
    assert code == 2
    assert "SDMA" in out and "SDBC" in out
    payload = json.loads(report_path.read_text())
    validate_report_schema(payload)
    assert payload["stats"]["findings"] == 3


def validate_report_schema(payload):
    assert set(payload) == {"findings", "units", "stats"}
    for f in payload["findings"]:
        assert set(f) == {"kind", "site_addr", "seq", "evidence", "lines", "hits"}
        assert f["kind"] in ("SDMA", "SDBC", "SDBC-layout-unknown")
        assert f["site_addr"].startswith("0x")
        assert isinstance(f["seq"], int) and isinstance(f["hits"], int)
        assert all(l.startswith("0x") for l in f["lines"])
    for u in payload["units"]:
        assert set(u) == {"representative", "members"}
        assert u["representative"] in u["members"]
    stats = payload["stats"]
    for key in ("sdma", "sdbc", "sdbc_layout_unknown", "findings", "units",
                "trace_records", "tainted_records", "elapsed_seconds"):
        assert key in stats


def test_analyze_clean_trace_exits_zero(capsys, tmp_path):
    trace = tmp_path / "clean.trace"
    trace.write_text(make_trace(["mov eax, 0x1", "add eax, 0x2"]))
    annot = tmp_path / "clean.annot"
    annot.write_text("SECRET reg ebx @0\n")
    bc = tmp_path / "clean.bc"
    bc.write_text("")
    report = tmp_path / "r.json"
    code, _, _ = run_cli(["--trace", str(trace), "--annot", str(annot),
                          "--branch-table", str(bc), "--report", str(report)], capsys)
    assert code == 0
    assert json.loads(report.read_text())["findings"] == []  # written either way


def test_input_error_exits_one(capsys, tmp_path):
    bad = tmp_path / "bad.trace"
    bad.write_text("T 0 xyz mov eax, ebx | nope\n")
    code, _, err = run_cli(["--trace", str(bad)], capsys)
    assert code == 1
    assert "bitline" in err


def test_missing_file_exits_one(capsys):
    code, _, err = run_cli(["--trace", "/nonexistent/trace"], capsys)
    assert code == 1
    assert "cannot read" in err


def test_missing_branch_table_warns_and_reports_unknown(capsys, tmp_path):
    trace = tmp_path / "t.trace"
    trace.write_text(make_trace(
        ["mov eax, [ebp+0x8]", "test eax, eax", "je 0x8049000"]))
    annot = tmp_path / "t.annot"
    annot.write_text("SECRET mem 0xbf000018 4 @0\n")
    code, out, err = run_cli(["--trace", str(trace), "--annot", str(annot)], capsys)
    assert code == 2
    assert "layout-unknown" in out
    assert "no branch table" in err


def test_gen_trace_roundtrips(capsys, tmp_path):
    trace = tmp_path / "synth.trace"
    annot = tmp_path / "synth.annot"
    bc = tmp_path / "synth.bc"
    code, _, _ = run_cli(["--mode", "gen-trace", "--length", "500",
                          "--trace", str(trace), "--annot", str(annot),
                          "--branch-table", str(bc)], capsys)
    assert code == 0
    code, out, _ = run_cli(["--trace", str(trace), "--annot", str(annot),
                            "--branch-table", str(bc)], capsys)
    assert code == 2  # the synthetic body contains a real secret-indexed load
    assert "SDMA" in out


def test_gen_trace_zero_length(capsys, tmp_path):
    trace = tmp_path / "empty.trace"
    code, _, _ = run_cli(["--mode", "gen-trace", "--length", "0",
                          "--trace", str(trace)], capsys)
    assert code == 0
    from bitline.frontend import parse_trace
    assert parse_trace(trace.read_text()) == []


def test_oracle_compare_mode(capsys, tmp_path):
    from bitline.oracle import serialize_program
    from bitline.synth import gen_program
    prog, table = gen_program(seed=3)
    from bitline.layout import serialize_branch_table
    ppath = tmp_path / "prog.txt"
    ppath.write_text(serialize_program(prog))
    bpath = tmp_path / "prog.bc"
    bpath.write_text(serialize_branch_table(table))
    annot = tmp_path / "empty.annot"
    annot.write_text("")
    code, out, _ = run_cli(["--mode", "oracle-compare", "--trace", str(ppath),
                            "--annot", str(annot), "--branch-table", str(bpath)], capsys)
    assert code == 0
    assert "verdict: sound" in out


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "bitline.cli", "--trace", data_path("bn_bits.trace"),
         "--annot", data_path("bn_bits.annot"),
         "--branch-table", data_path("bn_bits.bc")],
        capture_output=True, text=True)
    assert proc.returncode == 2
    assert "SDMA" in proc.stdout
