import json
import math

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbsdecode import NGramModel, Vocabulary, load_constraint_spec, tokenize
from cbsdecode.cli import main
from cbsdecode.fsm import compile_spec
from cbsdecode.neural import CaptionModel, save_checkpoint

RESULT_SCHEMA = {
    "type": "object",
    "required": ["id", "status", "tokens", "logprob", "text", "fsm_state", "satisfied_count"],
    "properties": {
        "status": {"enum": ["accepted", "fallback", "empty"]},
        "tokens": {"type": "array", "items": {"type": "integer"}},
        "logprob": {"type": ["number", "null"]},
        "text": {"type": "string"},
        "fsm_state": {"type": ["integer", "null"]},
        "satisfied_count": {"type": ["integer", "null"]},
        "per_state_best": {"type": "object"},
    },
}

CORPUS = """\
a man on a bus
a man on a chair
a table near a chair
the bus on the street
a chair and a table
the man near the table
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.txt").write_text(CORPUS, encoding="utf-8")
    (root / "constraints.json").write_text(
        json.dumps({"disjunctions": [["chair", "chairs"], ["table", "bus"]], "phrases": []})
    )
    (root / "empty.json").write_text(json.dumps({"disjunctions": [], "phrases": []}))
    (root / "lemmas.tsv").write_text("chair\tchairs\n", encoding="utf-8")
    code = main(
        ["train-ngram", str(root / "corpus.txt"), "--order", "2", "--alpha", "0.5",
         "--out", str(root / "model.json")]
    )
    assert code == 0
    return root


class TestTokenize:
    def test_lowercases_and_splits(self):
        assert tokenize("A Man on a Bus") == ["a", "man", "on", "a", "bus"]

    def test_collapses_whitespace(self):
        assert tokenize("  a\t b ") == ["a", "b"]

    def test_empty_line(self):
        assert tokenize("") == []

    @given(st.text(max_size=60))
    @settings(max_examples=150, deadline=None)
    def test_round_trip_modulo_case_and_runs(self, text):
        once = tokenize(text)
        assert tokenize(" ".join(once)) == once


class TestCompile:
    def test_dump_matches_direct_compilation(self, workdir):
        out = workdir / "fsm.json"
        code = main(
            ["compile", "--constraints", str(workdir / "constraints.json"),
             "--model", str(workdir / "model.json"),
             "--lemmas", str(workdir / "lemmas.tsv"), "--out", str(out)]
        )
        assert code == 0
        dump = json.loads(out.read_text())
        model = NGramModel.load(workdir / "model.json")
        from cbsdecode.fsm import LemmaMap

        spec = load_constraint_spec(
            workdir / "constraints.json", model.vocab,
            lemmas=LemmaMap.load(workdir / "lemmas.tsv"),
        )
        direct = compile_spec(spec, model.vocab)
        assert dump["num_states"] == direct.num_states == 4
        assert dump["accepting"] == sorted(direct.accepting)


class TestDecode:
    def run_decode(self, workdir, out_name, *extra):
        out = workdir / out_name
        code = main(
            ["decode", "--model", str(workdir / "model.json"), "--out", str(out), *extra]
        )
        assert code == 0
        return out.read_bytes()

    def test_lines_validate_and_accepted_passes_recompiled_fsm(self, workdir):
        raw = self.run_decode(
            workdir, "out.jsonl", "--constraints", str(workdir / "constraints.json"),
            "--max-len", "8", "--emit-per-state",
        )
        model = NGramModel.load(workdir / "model.json")
        spec = load_constraint_spec(workdir / "constraints.json", model.vocab)
        fsm = compile_spec(spec, model.vocab)
        for line in raw.decode().splitlines():
            obj = json.loads(line)
            jsonschema.validate(obj, RESULT_SCHEMA)
            if obj["status"] == "accepted":
                assert fsm.recognizes(obj["tokens"])
                assert obj["satisfied_count"] == 2

    def test_empty_spec_byte_identical_to_no_spec(self, workdir):
        with_empty = self.run_decode(
            workdir, "a.jsonl", "--constraints", str(workdir / "empty.json")
        )
        without = self.run_decode(workdir, "b.jsonl")
        assert with_empty == without

    def test_default_beam_size_is_five(self, workdir):
        from cbsdecode.cli import decode as decode_cmd

        beam_param = next(p for p in decode_cmd.params if p.name == "beam")
        assert beam_param.default == 5
        explicit = self.run_decode(workdir, "c.jsonl", "--beam", "5")
        default = self.run_decode(workdir, "d.jsonl")
        assert explicit == default

    def test_identical_configs_are_byte_identical(self, workdir):
        args = ("--constraints", str(workdir / "constraints.json"), "--seed", "7")
        first = self.run_decode(workdir, "e.jsonl", *args)
        second = self.run_decode(workdir, "f.jsonl", *args)
        assert first == second

    def test_workers_preserve_order_and_content(self, workdir):
        inputs = workdir / "inputs.jsonl"
        inputs.write_text("".join(json.dumps({"id": i}) + "\n" for i in range(6)))
        serial = self.run_decode(
            workdir, "g.jsonl", "--inputs", str(inputs),
            "--constraints", str(workdir / "constraints.json"),
        )
        parallel = self.run_decode(
            workdir, "h.jsonl", "--inputs", str(inputs),
            "--constraints", str(workdir / "constraints.json"), "--workers", "3",
        )
        assert serial == parallel
        ids = [json.loads(l)["id"] for l in serial.decode().splitlines()]
        assert ids == list(range(6))

    def test_oracle_agrees_with_wide_beam(self, workdir):
        oracle_out = workdir / "oracle.jsonl"
        code = main(
            ["oracle", "--model", str(workdir / "model.json"),
             "--constraints", str(workdir / "constraints.json"),
             "--max-len", "5", "--out", str(oracle_out)]
        )
        assert code == 0
        wide = self.run_decode(
            workdir, "wide.jsonl", "--constraints", str(workdir / "constraints.json"),
            "--beam", "100000", "--max-len", "5",
        )
        a = json.loads(oracle_out.read_text().splitlines()[0])
        b = json.loads(wide.decode().splitlines()[0])
        assert a["tokens"] == b["tokens"]
        assert a["logprob"] == pytest.approx(b["logprob"], abs=1e-9)


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 64
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["exit_code"] == 64

    def test_bad_flag_is_config_error(self, workdir, capsys):
        assert main(["decode", "--model", str(workdir / "model.json"), "--beam", "zero"]) == 65
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "config"

    def test_missing_file_is_config_error(self, capsys):
        assert main(["decode", "--model", "/nonexistent/model.json"]) == 65
        capsys.readouterr()

    def test_unknown_constraint_word_is_data_error(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"disjunctions": [["zebra"]]}))
        code = main(
            ["decode", "--model", str(workdir / "model.json"), "--constraints", str(bad)]
        )
        assert code == 66
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "data"

    def test_corrupt_model_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "model.json"
        bad.write_text("not json at all")
        assert main(["decode", "--model", str(bad)]) == 66
        capsys.readouterr()

    def test_non_finite_checkpoint_is_numeric_error(self, tmp_path, capsys, rng):
        v = Vocabulary.from_tokens(["a", "b"])
        m = CaptionModel.build(v, rng.normal(size=(4, 3)), 3, 1, rng=rng)
        m.w_v[0, 0] = math.nan
        path = tmp_path / "bad.npz"
        save_checkpoint(m, path)
        code = main(["decode", "--scorer", "neural", "--model", str(path)])
        assert code == 70
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "numeric"

    def test_missing_scorer_model_is_config_error(self, capsys):
        assert main(["decode", "--scorer", "uniform"]) == 65
        capsys.readouterr()


class TestEvalF1:
    def test_end_to_end_report(self, tmp_path):
        gen = tmp_path / "gen.txt"
        gen.write_text("a racket\na racquet\na racket\na court\n")
        refs = tmp_path / "refs.jsonl"
        rows = [
            {"references": ["the racket"]},
            {"references": ["a racquet on court"]},
            {"references": ["a tennis court"]},
            {"references": ["a racket on a court"]},
        ]
        refs.write_text("".join(json.dumps(r) + "\n" for r in rows))
        mentions = tmp_path / "mentions.json"
        mentions.write_text(
            json.dumps({"object": "racket", "mentions": ["racket", "rackets", "racquet"]})
        )
        out = tmp_path / "report.json"
        code = main(
            ["eval-f1", "--generated", str(gen), "--references", str(refs),
             "--mentions", str(mentions), "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["per_object"]["racket"]["f1"] == pytest.approx(2 / 3)
        assert report["macro"]["f1"] == pytest.approx(2 / 3)

    def test_decode_jsonl_accepted_as_generated(self, workdir, tmp_path):
        decode_out = tmp_path / "dec.jsonl"
        assert main(["decode", "--model", str(workdir / "model.json"), "--out", str(decode_out)]) == 0
        refs = tmp_path / "refs.jsonl"
        refs.write_text(json.dumps({"references": ["a chair"]}) + "\n")
        mentions = tmp_path / "m.json"
        mentions.write_text(json.dumps({"object": "chair", "mentions": ["chair"]}))
        code = main(
            ["eval-f1", "--generated", str(decode_out), "--references", str(refs),
             "--mentions", str(mentions), "--out", str(tmp_path / "r.json")]
        )
        assert code == 0


class TestTrainAndExpand:
    def write_embeddings(self, path, words, dim, rng):
        with open(path, "w", encoding="utf-8") as fh:
            for w in sorted(set(words)) + ["<eos>"]:
                vals = " ".join(repr(float(x)) for x in rng.normal(size=dim))
                fh.write(f"{w} {vals}\n")

    def test_train_expand_decode_cycle(self, tmp_path, rng):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("the cat sat\nthe dog ran\nthe cat ran\n")
        words = ["the", "cat", "sat", "dog", "ran", "zebra"]
        emb = tmp_path / "emb.txt"
        self.write_embeddings(emb, words, dim=8, rng=rng)
        ckpt = tmp_path / "lm.npz"
        code = main(
            ["train-lm", str(corpus), "--embeddings", str(emb), "--hidden", "6",
             "--cond-dim", "2", "--epochs", "30", "--lr", "0.4", "--seed", "1",
             "--out", str(ckpt)]
        )
        assert code == 0
        manifest = tmp_path / "exp.json"
        manifest.write_text(json.dumps([{"word": "zebra", "source": "embedding-file"}]))
        expanded = tmp_path / "lm2.npz"
        code = main(
            ["expand", "--model", str(ckpt), "--embeddings", str(emb),
             "--manifest", str(manifest), "--out", str(expanded)]
        )
        assert code == 0
        constraints = tmp_path / "c.json"
        constraints.write_text(json.dumps({"disjunctions": [["zebra"]]}))
        # pre-expansion the constraint word is unknown
        assert main(
            ["decode", "--scorer", "neural", "--model", str(ckpt),
             "--constraints", str(constraints)]
        ) == 66
        out = tmp_path / "out.jsonl"
        code = main(
            ["decode", "--scorer", "neural", "--model", str(expanded),
             "--constraints", str(constraints), "--max-len", "8", "--out", str(out)]
        )
        assert code == 0
        obj = json.loads(out.read_text().splitlines()[0])
        assert obj["status"] == "accepted"
        assert "zebra" in obj["text"].split()

    def test_train_lm_missing_embedding_word_fails(self, tmp_path, rng):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("the cat sat\n")
        emb = tmp_path / "emb.txt"
        self.write_embeddings(emb, ["the", "cat"], dim=4, rng=rng)  # no "sat"
        code = main(
            ["train-lm", str(corpus), "--embeddings", str(emb),
             "--epochs", "1", "--out", str(tmp_path / "x.npz")]
        )
        assert code == 66


class TestMultiPhraseFlag:
    def test_any_mode_picks_best_phrase_run(self, workdir):
        spec = workdir / "phrases.json"
        spec.write_text(
            json.dumps({"disjunctions": [], "phrases": [["the", "street"], ["a", "chair"]]})
        )
        out = workdir / "any.jsonl"
        code = main(
            ["decode", "--model", str(workdir / "model.json"), "--constraints", str(spec),
             "--phrase-mode", "any", "--max-len", "8", "--out", str(out)]
        )
        assert code == 0
        obj = json.loads(out.read_text().splitlines()[0])
        assert obj["status"] == "accepted"
        text = obj["text"]
        assert "the street" in text or "a chair" in text
