from __future__ import annotations

import json
from pathlib import Path

import pytest

from sketchfuse.cli import main
from sketchfuse.report import parse_json
from sketchfuse.variants import corpus

GOLDEN = Path(__file__).resolve().parent / "golden"
PROGRAMS = Path(__file__).resolve().parent.parent / "programs"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_compile_matches_golden(capsys):
    code, out, _ = run(capsys, "compile", "--variant", "vanilla")
    assert code == 0
    assert out == (GOLDEN / "compile_vanilla.txt").read_text()


def test_compile_without_semantic_keeps_the_barrier(capsys):
    code, out, _ = run(capsys, "compile", "--variant", "vanilla", "--no-semantic", "--format", "json")
    assert code == 0 and parse_json(out)["plan"]["kernel_count"] > 1


def test_json_is_byte_identical_and_round_trips(capsys):
    args = ("stats", "--variant", "causal-mha-n256", "--format", "json")
    _, first, _ = run(capsys, *args)
    _, second, _ = run(capsys, *args)
    assert first == second
    data = parse_json(first)
    assert json.dumps(data, indent=2, sort_keys=True) + "\n" == first
    assert data["fused"]["intermediate_bytes_materialized"] == 0


def test_malformed_program_reports_line(capsys, tmp_path):
    src = tmp_path / "bad.sf"
    src.write_text("dim M = 4\nx = input() dims=[M]\ny = nope(x)\n")
    code, _, err = run(capsys, "compile", "--input", str(src))
    assert code == 2
    assert "bad.sf:3:" in err


def test_invalid_program_reports_node_line(capsys, tmp_path):
    src = tmp_path / "bad.sf"
    src.write_text("dim M = 4\ndim N = 3\nx = input() dims=[M]\n\ny = x dims=[N]\n")
    code, _, err = run(capsys, "compile", "--input", str(src))
    assert code == 2 and "bad.sf:5: y:" in err


@pytest.mark.parametrize("argv", [
    ("compile",),
    ("compile", "--variant", "nope"),
    ("compile", "--variant", "vanilla", "--tile", "M"),
    ("compile", "--variant", "vanilla", "--tile", "Z=4"),
    ("compile", "--input", "/nonexistent.sf"),
    ("stats", "--variant", "vanilla", "--sweep", "m=1"),
    ("compile", "--variant", "vanilla", "--kv-heads", "3"),
])
def test_usage_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["compile", "--bogus"])
    assert info.value.code == 2


def test_tile_hint_changes_the_grid(capsys):
    _, out, _ = run(capsys, "compile", "--variant", "vanilla", "--tile", "M=128", "--format", "json")
    assert parse_json(out)["plan"]["kernels"][0]["grid"] == [["M", 2]]


def test_verify_passes_and_runs_the_algebra_suite(capsys):
    code, out, _ = run(capsys, "verify", "--variant", "evoformer", "--format", "json")
    data = parse_json(out)
    assert code == 0 and data["passed"]
    assert data["algebra"]["ok"] and data["online_suite"]["passed"]
    assert len(data["results"]) == 3


def test_vanilla_512_verifies(capsys):
    code, out, _ = run(capsys, "verify", "--variant", "vanilla-mha-n512", "--format", "json")
    assert code == 0
    assert max(r["norm_rel"] for r in parse_json(out)["results"]) <= 1e-5


def test_injected_bug_fails_verification(capsys):
    code, out, _ = run(capsys, "verify", "--variant", "vanilla", "--seeds", "1", "--inject-bug")
    assert code == 1
    assert "FAIL vanilla seed=0 output=out norm_rel=" in out


def test_verify_program_file_in_f64(capsys):
    code, out, _ = run(capsys, "verify", "--input", str(PROGRAMS / "twin_matmul.sf"), "--dtype", "f64", "--seeds", "2")
    assert code == 0 and "tolerance 1e-10" in out


def test_stats_sweep_table(capsys):
    code, out, _ = run(capsys, "stats", "--variant", "vanilla", "--sweep", "n=256,512,1024", "--format", "json")
    rows = parse_json(out)["sweep"]
    assert code == 0 and [r["n"] for r in rows] == [256, 512, 1024]
    for a, b in zip(rows, rows[1:]):
        assert b["unfused"]["score_elements"] == 4 * a["unfused"]["score_elements"]
        assert b["fused"]["total_traffic"] <= 2.2 * a["fused"]["total_traffic"]
    _, human, _ = run(capsys, "stats", "--variant", "vanilla", "--sweep", "n=256,512")
    assert "4.00" in human


def test_stats_pointwise_program(capsys, tmp_path):
    src = tmp_path / "add.sf"
    src.write_text("dim M = 64\ndim N = 64\nx = input() dims=[M, N]\ny = input() dims=[M, N]\nz = add(x, y)\nout = output(z)\n")
    _, out, _ = run(capsys, "stats", "--input", str(src), "--format", "json")
    data = parse_json(out)
    assert data["fused"]["total_traffic"] == data["unfused"]["total_traffic"]


def test_run_with_trace_and_plan(capsys):
    code, out, _ = run(capsys, "run", "--variant", "causal", "--trace", "--emit-plan", "--format", "json")
    data = parse_json(out)
    assert code == 0
    assert len(data["trace"]) == 4 and data["plan"]["kernel_count"] == 1
    assert data["outputs"]["out"]["shape"] == [1, 2, 256, 64]


def test_corpus_listing(capsys):
    _, out, _ = run(capsys, "corpus", "--format", "json")
    assert [e["name"] for e in parse_json(out)["corpus"]] == [n for n, _ in corpus()]


@pytest.mark.parametrize("name", [n for n, _ in corpus()])
def test_every_corpus_entry_verifies_by_name(capsys, name):
    assert run(capsys, "verify", "--variant", name)[0] == 0
