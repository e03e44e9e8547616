import json

import pytest

from tleaf.cli import main

FAST = ["--stage1-steps", "2", "--stage2-steps", "2", "--batch-size", "4"]


def _run(*argv):
    return main([str(a) for a in argv])


def test_compile_writes_dot_with_double_circle(tmp_path, capsys):
    dot = tmp_path / "out.dot"
    assert _run("compile", "p U q", "--dot", dot) == 0
    assert "doublecircle" in dot.read_text()
    assert "states" in capsys.readouterr().out


def test_compile_json(tmp_path):
    out = tmp_path / "a.json"
    assert _run("--out", out, "compile", "F p", "--props", "p,q") == 0
    assert json.loads(out.read_text())["propositions"] == ["p", "q"]


def test_usage_and_input_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        _run("frobnicate")
    assert e.value.code == 1
    assert _run("compile", "p U (") == 2
    assert _run("check", "--corpus", tmp_path / "missing.json") == 2
    assert _run("check") == 1


def test_check_traces(tmp_path, capsys):
    traces = tmp_path / "t.json"
    traces.write_text(json.dumps([[["p"], ["q"]], [["q"]], [["p"]]]))
    out = tmp_path / "v.json"
    assert _run("--out", out, "check", "p U q", "--traces", traces) == 0
    assert json.loads(out.read_text())["verdicts"] == [True, True, False]


def test_gen_dataset_then_check(tmp_path):
    corpus = tmp_path / "c.json"
    assert _run("--out", corpus, "gen-dataset", "--n-formulas", "5", "--traces", "3") == 0
    res = tmp_path / "r.json"
    assert _run("--out", res, "check", "--corpus", corpus) == 0
    assert json.loads(res.read_text())["agreement"] == 1.0


def test_subcommands_are_byte_deterministic(tmp_path):
    corpus = tmp_path / "c.json"
    _run("--out", corpus, "gen-dataset", "--n-formulas", "10", "--traces", "2")
    outputs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        _run("--out", d / "m", "train-embedder", "--corpus", corpus, *FAST)
        _run("--out", d / "e.csv", "export-embeddings", "--corpus", corpus, "--model", d / "m", "--limit", "2")
        _run("--out", d / "roll.jsonl", "cooking", "rollout")
        outputs.append([(d / n).read_bytes() for n in ("m.ckpt", "m.json", "m.log.jsonl", "e.csv", "roll.jsonl")])
    assert outputs[0] == outputs[1]


def test_bench_routing(tmp_path, capsys):
    corpus_args = ["--n-formulas", "10", "--clf-epochs", "1"]
    out = tmp_path / "b.json"
    assert _run("--out", out, "bench", "--regime", "low", "--seeds", "3", *corpus_args, *FAST) == 0
    rep = json.loads(out.read_text())
    assert {c["representation"] for c in rep["cells"]} == {"dfa", "syntax_tree"}
    assert "| dfa |" in capsys.readouterr().out


def test_cooking_kb(tmp_path):
    out = tmp_path / "kb.json"
    assert _run("--out", out, "cooking", "kb") == 0
    rows = json.loads(out.read_text())["constraints"]
    assert {r["kind"] for r in rows} == {"affordance", "dependency"}
