import io
import json
import socket
import sys
from pathlib import Path

import pytest

import guidetree
from guidetree.cli import EXIT_ABORTED, EXIT_INVALID, EXIT_IO, EXIT_OK, main

BUILDER = Path(__file__).parent / "fixtures" / "builder"


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


# ---- validate ------------------------------------------------------------


def test_validate_ok(capsys):
    assert main(["validate", str(guidetree.tree_path("headache"))]) == EXIT_OK
    assert "OK" in capsys.readouterr().out


@pytest.mark.parametrize("name", ["bad_threshold", "cycle", "dangling_ref", "unreachable", "no_action_reachable"])
def test_validate_invalid(fixtures_dir, name):
    assert main(["validate", str(fixtures_dir / "invalid" / f"{name}.json")]) == EXIT_INVALID


def test_validate_json_output(fixtures_dir, capsys):
    main(["validate", "--json", str(fixtures_dir / "invalid" / "cycle.json")])
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] is False and doc["errors"][0]["code"] == "CYCLE"


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == EXIT_IO


def test_validate_parse_error(tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{"schema_version": "1"}')
    assert main(["validate", str(p)]) == EXIT_INVALID


# ---- run / eval / trace --------------------------------------------------


def test_scripted_run_is_perfect(tmp_path, capsys):
    rc = main(["run", "--corpus", str(guidetree.corpus_path("headache")), "--oracle", "scripted",
               "--runs", "2", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "| Binary | 1.00 ± 0.00 | 1.00 ± 0.00 | 1.00 ± 0.00 |" in out
    assert "| Multi-class | 1.00 ± 0.00 | 1.00 ± 0.00 | 1.00 ± 0.00 |" in out
    names = set(_files(tmp_path))
    assert {"traces_run1.jsonl", "traces_run2.jsonl", "report_run1.json", "aggregate.json", "aggregate.md"} <= names


def test_eval_reproduces_run_outputs(tmp_path):
    run_dir, eval_dir = tmp_path / "run", tmp_path / "eval"
    corpus = str(guidetree.corpus_path("prostate_cancer"))
    assert main(["run", "--corpus", corpus, "--oracle", "noisy", "--p-no-to-yes", "0.3",
                 "--runs", "3", "--seed", "7", "--jobs", "4", "--out", str(run_dir)]) == EXIT_OK
    assert main(["eval", "--corpus", corpus, "--traces", str(run_dir), "--out", str(eval_dir)]) == EXIT_OK
    ran, evald = _files(run_dir), _files(eval_dir)
    for name, data in evald.items():
        assert ran[name] == data, name
    assert {n for n in ran if not n.startswith("traces_")} == set(evald)


def test_noisy_runs_identical_across_invocations(tmp_path):
    corpus = str(guidetree.corpus_path("headache"))
    for d in ("a", "b"):
        main(["run", "--corpus", corpus, "--oracle", "noisy", "--p-no-to-yes", "0.3", "--runs", "2",
              "--seed", "11", "--jobs", "3" if d == "a" else "1", "--out", str(tmp_path / d)])
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_trace_command(tmp_path, capsys):
    corpus = guidetree.corpus_path("headache")
    main(["run", "--corpus", str(corpus), "--runs", "1", "--out", str(tmp_path)])
    vid = json.loads(corpus.read_text().splitlines()[1])["id"]
    capsys.readouterr()
    assert main(["trace", str(tmp_path / "traces_run1.jsonl"), "--vignette", vid]) == EXIT_OK
    assert "step 0:" in capsys.readouterr().out
    assert main(["trace", str(tmp_path / "traces_run1.jsonl"), "--vignette", "missing"]) == EXIT_IO


def test_run_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corpus": str(guidetree.corpus_path("low_back_pain")), "runs": 3, "oracle": {"backend": "always-yes"}}))
    assert main(["run", "--config", str(cfg), "--runs", "1", "--out", str(tmp_path / "o")]) == EXIT_OK
    assert (tmp_path / "o" / "traces_run1.jsonl").exists()
    assert not (tmp_path / "o" / "traces_run2.jsonl").exists()


def test_run_bad_settings(tmp_path):
    corpus = str(guidetree.corpus_path("headache"))
    assert main(["run", "--corpus", corpus, "--runs", "0", "--out", str(tmp_path)]) == EXIT_IO
    assert main(["run", "--corpus", str(tmp_path / "missing.jsonl")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["run", "--config", str(bad)]) == EXIT_IO


def test_run_rejects_invalid_tree(tmp_path, fixtures_dir):
    assert main(["run", "--corpus", str(guidetree.corpus_path("headache")), "--tree",
                 str(fixtures_dir / "invalid" / "cycle.json"), "--out", str(tmp_path)]) == EXIT_INVALID


def test_remote_unreachable_aborts(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"oracle": {"backend": "remote", "remote": {
        "endpoint": f"http://127.0.0.1:{_free_port()}/v1/chat/completions", "max_retries": 0, "timeout": 1.0}}}))
    rc = main(["run", "--config", str(cfg), "--corpus", str(guidetree.corpus_path("prostate_cancer")),
               "--runs", "1", "--jobs", "8", "--out", str(tmp_path / "o")])
    assert rc == EXIT_ABORTED
    line = json.loads((tmp_path / "o" / "traces_run1.jsonl").read_text().splitlines()[0])
    assert line["aborted"] and line["error"]


def test_interactive_needs_vignette(tmp_path):
    assert main(["run", "--corpus", str(guidetree.corpus_path("headache")), "--oracle", "interactive",
                 "--out", str(tmp_path)]) == EXIT_IO


def test_interactive_single_vignette(tmp_path, monkeypatch, capsys):
    corpus = guidetree.corpus_path("headache")
    vid = json.loads(corpus.read_text().splitlines()[1])["id"]
    monkeypatch.setattr(sys, "stdin", io.StringIO("y\n" * 50))
    rc = main(["run", "--corpus", str(corpus), "--oracle", "interactive", "--vignette", vid, "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert (tmp_path / "traces_run1.jsonl").exists() and not (tmp_path / "traces_run2.jsonl").exists()
    assert "step 0:" in capsys.readouterr().out


# ---- corpus commands -----------------------------------------------------


def test_stats_formats(capsys):
    paths = [str(guidetree.corpus_path(d)) for d in guidetree.DOMAINS]
    assert main(["stats", *paths]) == EXIT_OK
    assert "| Multi-criteria | 30 | 33 | NA |" in capsys.readouterr().out
    assert main(["stats", "--csv", *paths]) == EXIT_OK
    assert capsys.readouterr().out.startswith("statistic,")
    assert main(["stats", "--json", paths[0]]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)[0]["n_vignettes"] == 128


def test_gen_corpus_round_trip(tmp_path):
    out = tmp_path / "c" / "demo.jsonl"
    rc = main(["gen-corpus", "--tree", str(guidetree.tree_path("headache")),
               "--templates", str(guidetree.templates_path("headache")),
               "--single", "4", "--exclusion", "2", "--lengths", "short,long", "--seed", "3",
               "--out", str(out), "--prompts", str(tmp_path / "p")])
    assert rc == EXIT_OK
    assert len(list((tmp_path / "p").iterdir())) == 6
    assert main(["run", "--corpus", str(out), "--runs", "1", "--out", str(tmp_path / "r")]) == EXIT_OK


def test_gen_corpus_infeasible(tmp_path, fixtures_dir):
    rc = main(["gen-corpus", "--tree", str(fixtures_dir / "lab_threshold_only.json"),
               "--templates", str(guidetree.templates_path("prostate_cancer")),
               "--multi", "3", "--out", str(tmp_path / "x.jsonl")])
    assert rc == EXIT_INVALID


# ---- build-tree ----------------------------------------------------------


def test_build_tree_offline_matches_golden(tmp_path):
    rc = main(["build-tree", str(BUILDER / "guideline.txt"), "--budget", "40", "--domain", "headache_demo",
               "--offline", str(BUILDER / "replies"), "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert (tmp_path / "tree.json").read_bytes() == (BUILDER / "golden_tree.json").read_bytes()
    assert main(["validate", str(tmp_path / "tree.json")]) == EXIT_OK


def test_build_tree_bad_replies(tmp_path):
    rc = main(["build-tree", str(BUILDER / "guideline.txt"), "--budget", "40",
               "--offline", str(BUILDER / "bad_replies"), "--out", str(tmp_path)])
    assert rc == EXIT_INVALID
    lint = json.loads((tmp_path / "lint.json").read_text())
    assert any(f.get("segment_index") == 1 and "BAD_THRESHOLD" in f["codes"] for f in lint["failures"])


def test_build_tree_missing_reply(tmp_path):
    rc = main(["build-tree", str(BUILDER / "guideline.txt"), "--budget", "40",
               "--offline", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == EXIT_IO
