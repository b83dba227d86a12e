"""Command-line lifecycle checks, run in process through main()."""

import json
import os

import pytest

from pocketnlu.cli import main
from pocketnlu.corpus import read_jsonl, write_jsonl
from pocketnlu.ontology import symbol_vocabulary
from pocketnlu.parser import ModelConfig, ParserNetwork, load_model, save_model

TINY = ModelConfig(
    embed_dim=12,
    label_dim=4,
    hidden=16,
    layers=1,
    heads=2,
    ffn=32,
    symbol_dim=8,
    buckets=64,
    label_buckets=16,
)


def _data(name: str) -> str:
    from importlib.resources import files

    return str(files("pocketnlu") / "data" / name)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, onto):
    """An untrained tiny model on disk; decoding is still sound, so every
    subcommand that needs --model can run against it."""
    path = tmp_path_factory.mktemp("ckpt") / "tiny.pnlu"
    net = ParserNetwork(symbol_vocabulary(onto), TINY, seed=5)
    save_model(str(path), net)
    return str(path)


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory, small_corpus):
    path = tmp_path_factory.mktemp("corpus") / "replay.jsonl"
    write_jsonl(small_corpus[:30], str(path))
    return str(path)


# ======================================================================
# lint-ontology


def test_lint_bundled_ontology_is_clean(capsys):
    assert main(["lint-ontology"]) == 0
    assert "0 violations" in capsys.readouterr().out


def test_lint_flags_problems(tmp_path, capsys):
    bad = tmp_path / "bad.ont"
    bad.write_text(
        "domain Bad\n\n"
        "verb Bad.go\n"
        "  where: Nowhere\n"
        "  source: string\n\n"
        "enum Ghost\n"
    )
    empty = tmp_path / "triggers.tsv"
    empty.write_text("")
    assert main(["lint-ontology", str(bad), "--triggers", str(empty)]) == 1
    out = capsys.readouterr().out
    assert "undefined type 'Nowhere'" in out
    assert "has no members" in out
    assert "3 violations" in out


def test_lint_missing_file_exits_2(tmp_path, capsys):
    assert main(["lint-ontology", str(tmp_path / "absent.ont")]) == 2
    assert "no such file" in capsys.readouterr().err


# ======================================================================
# gen-corpus


def test_gen_corpus_is_seed_deterministic(tmp_path, capsys):
    a, b, c = (str(tmp_path / n) for n in ("a.jsonl", "b.jsonl", "c.jsonl"))
    assert main(["gen-corpus", "--out", a, "--n", "5", "--seed", "3"]) == 0
    assert "wrote 5 conversations" in capsys.readouterr().out
    assert main(["gen-corpus", "--out", b, "--n", "5", "--seed", "3"]) == 0
    assert main(["gen-corpus", "--out", c, "--n", "5", "--seed", "4"]) == 0
    a_bytes = open(a, "rb").read()
    assert a_bytes == open(b, "rb").read()
    assert a_bytes != open(c, "rb").read()


def test_global_seed_matches_subcommand_seed(tmp_path):
    a = str(tmp_path / "a.jsonl")
    b = str(tmp_path / "b.jsonl")
    assert main(["--seed", "3", "gen-corpus", "--out", a, "--n", "4"]) == 0
    assert main(["gen-corpus", "--out", b, "--n", "4", "--seed", "3"]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


# ======================================================================
# train / quantize


def test_train_writes_loadable_checkpoint(tmp_path, small_corpus, capsys):
    corpus = str(tmp_path / "train.jsonl")
    write_jsonl(small_corpus[:10], corpus)
    model = str(tmp_path / "m.pnlu")
    rc = main([
        "train", "--corpus", corpus, "--model", model,
        "--epochs", "1", "--batch-size", "8",
        "--eval-corpus", corpus,
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"saved {model}" in out
    assert "eval exact match:" in out
    net = load_model(model)
    assert net.symbols  # checkpoint carries its own vocabulary


def test_quantize_shrinks_checkpoint(tmp_path, checkpoint, capsys):
    dst = str(tmp_path / "half.pnlu")
    assert main(["quantize", checkpoint, dst]) == 0
    out = capsys.readouterr().out
    assert "x)" in out
    assert os.path.getsize(dst) < os.path.getsize(checkpoint)
    assert load_model(dst).symbols == load_model(checkpoint).symbols


def test_quantize_missing_source_exits_2(tmp_path, capsys):
    rc = main(["quantize", str(tmp_path / "nope.pnlu"), str(tmp_path / "out.pnlu")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


# ======================================================================
# parse


def test_parse_prints_tree_and_trace(checkpoint, capsys):
    assert main(["parse", "--model", checkpoint, "play some jazz for me"]) == 0
    out = capsys.readouterr().out
    assert "route: general" in out
    # one trace row per token, each naming the token
    for token in ("play", "some", "jazz"):
        assert token in out


def test_parse_override_route(checkpoint, capsys):
    rc = main([
        "parse", "--model", checkpoint,
        "--overrides", _data("overrides.tsv"),
        "turn on the torch",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "route: override" in out
    assert "(rule torch)" in out
    assert "System.unsupported" in out


def test_parse_knowledge_gate(checkpoint, capsys):
    assert main(["parse", "--model", checkpoint, "who wrote hamlet"]) == 0
    out = capsys.readouterr().out
    assert "route: knowledge" in out
    assert 'Knowledge.query(text="who wrote hamlet")' in out


def test_parse_malformed_overrides_exits_2(tmp_path, checkpoint, capsys):
    rules = tmp_path / "rules.tsv"
    rules.write_text("just one column, no tabs\n")
    rc = main([
        "parse", "--model", checkpoint,
        "--overrides", str(rules), "anything",
    ])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_parse_missing_model_exits_2(tmp_path, capsys):
    rc = main(["parse", "--model", str(tmp_path / "gone.pnlu"), "hello"])
    assert rc == 2


# ======================================================================
# eval


def test_eval_self_replay_is_exact(corpus_file, capsys):
    assert main(["eval", "--corpus", corpus_file]) == 0
    out = capsys.readouterr().out
    assert "exact match:    1.0000" in out
    assert "user-facing:    0.0000" in out
    assert "fallbacks:      0" in out


def test_eval_with_model_writes_report(tmp_path, corpus_file, checkpoint, capsys):
    report = str(tmp_path / "report.json")
    rc = main([
        "eval", "--corpus", corpus_file, "--model", checkpoint,
        "--limit", "20", "--report", report,
    ])
    assert rc == 0
    data = json.load(open(report))
    assert data["turns"] == 20
    assert 0.0 <= data["exact_match_rate"] <= 1.0
    assert isinstance(data["triage"], list)


def test_eval_inject_calibrates_and_repeats(tmp_path, small_corpus, capsys):
    corpus = str(tmp_path / "inject.jsonl")
    write_jsonl(small_corpus, corpus)
    report = str(tmp_path / "fault.json")
    argv = [
        "eval", "--corpus", corpus, "--inject", "0.3",
        "--limit", "120", "--seed", "5", "--report", report,
    ]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "designed harmful:     0.300" in out
    assert "validate the harness mechanism" in out
    data = json.load(open(report))
    assert data["turns"] == 120
    # loose band; the acceptance run uses 1,000 turns for the +-0.05 check
    assert 0.15 <= data["measured_user_facing"] <= 0.45
    report2 = str(tmp_path / "fault2.json")
    assert main(argv[:-1] + [report2]) == 0
    assert open(report).read() == open(report2).read()


# ======================================================================
# repl


def _scripted_input(monkeypatch, lines):
    feed = iter(lines)

    def fake_input(prompt=""):
        try:
            return next(feed)
        except StopIteration:
            raise EOFError

    monkeypatch.setattr("builtins.input", fake_input)


def test_repl_session_records_transcript(tmp_path, checkpoint, monkeypatch, capsys):
    transcript = str(tmp_path / "session.jsonl")
    _scripted_input(monkeypatch, [
        "who is ada lovelace",
        "",
        "turn on the torch",
        "/reset",
        "play some jazz",
    ])
    rc = main([
        "repl", "--model", checkpoint,
        "--overrides", _data("overrides.tsv"),
        "--transcript", transcript,
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "interactive session" in out
    assert "route:   knowledge" in out
    assert "(rule torch)" in out
    assert "context cleared" in out
    records = read_jsonl(transcript)
    assert [len(r.turns) for r in records] == [2, 1]
    assert records[0].turns[0].utterance == "who is ada lovelace"
    assert records[0].turns[0].gold_tree.verb == "Knowledge.query"


def test_repl_shows_context_features(checkpoint, monkeypatch, capsys):
    _scripted_input(monkeypatch, ["who wrote dune", "what about the sequel"])
    assert main(["repl", "--model", checkpoint]) == 0
    out = capsys.readouterr().out
    # second turn carries the first as context tokens
    assert "context: " in out
    assert "who wrote dune" in out


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit):
        main([])
