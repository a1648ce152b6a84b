"""Command-line surface: compile constraints, decode, train scorers, expand
vocabularies, and evaluate, as reproducible batch runs.

One process handles one command. Exit codes: 0 success, 64 unknown command,
65 bad configuration, 66 data error, 70 numeric error; failures emit a
machine-readable JSON object on stderr. Log level comes from CBSDECODE_LOG.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
import sys
from typing import Sequence

import click
import numpy as np

from . import embeddings as emb
from . import fsm as fsm_mod
from . import metrics, neural, scorers
from .errors import (
    CapacityError,
    CbsError,
    ConfigError,
    DataError,
    NumericError,
)
from .search import (
    DecodeResult,
    SearchParams,
    constrained_beam_search,
    decode_multi_phrase,
    exhaustive_decode,
)
from .vocab import Vocabulary, tokenize  # noqa: F401  (tokenize is part of the CLI surface)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNKNOWN_COMMAND = 64
EXIT_CONFIG = 65
EXIT_DATA = 66
EXIT_NUMERIC = 70


class _UnknownCommand(Exception):
    pass


class _Cli(click.Group):
    def resolve_command(self, ctx, args):
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError:
            raise _UnknownCommand(args[0] if args else "")


@click.group(cls=_Cli)
def cli():
    """Constrained beam search decoding toolkit."""


# model / scorer loading


def _is_npz(path: str) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"PK"


def _load_model(path: str):
    """Load either scorer kind by sniffing the container format."""
    if _is_npz(path):
        return neural.load_checkpoint(path)
    return scorers.NGramModel.load(path)


def _resolve_scorer(kind: str, model_path: str | None) -> tuple[scorers.Scorer, Vocabulary]:
    if model_path is None:
        raise ConfigError(f"--scorer {kind} requires --model")
    model = _load_model(model_path)
    if kind == "uniform":
        return scorers.UniformScorer(len(model.vocab), eos=model.vocab.eos), model.vocab
    if kind == "ngram" and not isinstance(model, scorers.NGramModel):
        raise ConfigError(f"{model_path} is not an n-gram model")
    if kind == "neural" and not isinstance(model, neural.CaptionModel):
        raise ConfigError(f"{model_path} is not a neural checkpoint")
    return model, model.vocab


def _load_spec(constraints: str | None, lemmas: str | None, vocab: Vocabulary):
    lemma_map = fsm_mod.LemmaMap.load(lemmas) if lemmas else None
    if constraints is None:
        return None
    return fsm_mod.load_constraint_spec(constraints, vocab, lemmas=lemma_map)


def _read_inputs(path: str | None) -> list[dict]:
    if path is None:
        return [{"id": 0}]
    inputs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: each input must be a JSON object")
            inputs.append(obj)
    if not inputs:
        raise DataError(f"input file {path} is empty")
    return inputs


def _write_lines(lines: Sequence[str], out: str | None) -> None:
    if out is None:
        for line in lines:
            click.echo(line)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out is None:
        click.echo(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.write("\n")


# decode worker plumbing; module-level so multiprocessing can fork it

_WORK: dict = {}


def _decode_one_setup(scorer, vocab, spec, params, phrase_mode, per_state):
    _WORK.update(
        scorer=scorer,
        vocab=vocab,
        spec=spec,
        params=params,
        phrase_mode=phrase_mode,
        per_state=per_state,
    )


def _run_one_decode(scorer, vocab, spec, params, phrase_mode, conditioning) -> DecodeResult:
    if spec is None or spec.empty:
        machine = fsm_mod.trivial_fsm(len(vocab))
        return constrained_beam_search(scorer, machine, params, conditioning)
    if phrase_mode == "any" and spec.phrases:
        base = None
        if spec.disjunctions.disjunctions:
            base = fsm_mod.compile_disjunctions(spec.disjunctions, vocab)
        return decode_multi_phrase(
            scorer, spec.phrases, params, conditioning, base_fsm=base
        )
    return constrained_beam_search(scorer, fsm_mod.compile_spec(spec, vocab), params, conditioning)


def _decode_one(task: tuple[int, dict]) -> tuple[int, str]:
    index, item = task
    conditioning = None
    if "features" in item:
        conditioning = np.asarray(item["features"], dtype=np.float64)
    result = _run_one_decode(
        _WORK["scorer"],
        _WORK["vocab"],
        _WORK["spec"],
        _WORK["params"],
        _WORK["phrase_mode"],
        conditioning,
    )
    line: dict = {"id": item.get("id", index)}
    line.update(result.to_dict(_WORK["vocab"], per_state=_WORK["per_state"]))
    return index, json.dumps(line)


def _search_params(beam, max_len, no_repeat, length_normalize) -> SearchParams:
    return SearchParams(
        beam_size=beam,
        max_len=max_len,
        no_repeat=no_repeat,
        length_normalize=length_normalize,
    )


_SCORER_CHOICE = click.Choice(["ngram", "neural", "uniform"])


@cli.command("compile")
@click.option("--constraints", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lemmas", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
def compile_constraints(constraints, model, lemmas, out):
    """Compile a constraint spec against a model's vocabulary; write the FSM
    dump as JSON."""
    vocab = _load_model(model).vocab
    spec = _load_spec(constraints, lemmas, vocab)
    machine = fsm_mod.compile_spec(spec, vocab)
    _write_json(machine.dump(), out)


@cli.command()
@click.option("--scorer", "scorer_kind", type=_SCORER_CHOICE, default="ngram", show_default=True)
@click.option("--model", type=click.Path(exists=True, dir_okay=False))
@click.option("--inputs", type=click.Path(exists=True, dir_okay=False))
@click.option("--constraints", type=click.Path(exists=True, dir_okay=False))
@click.option("--lemmas", type=click.Path(exists=True, dir_okay=False))
@click.option("--beam", default=5, show_default=True)
@click.option("--max-len", default=20, show_default=True)
@click.option("--no-repeat/--allow-repeat", default=True, show_default=True)
@click.option("--length-normalize", is_flag=True)
@click.option(
    "--phrase-mode",
    type=click.Choice(["all", "any"]),
    default="all",
    show_default=True,
    help="all: every phrase must appear (product machine); any: decode per "
    "phrase and keep the best accepted run",
)
@click.option("--emit-per-state", is_flag=True, help="include per-beam best hypotheses")
@click.option("--workers", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True, help="recorded for reproducibility; decoding itself is deterministic")
@click.option("--out", type=click.Path(dir_okay=False))
def decode(
    scorer_kind,
    model,
    inputs,
    constraints,
    lemmas,
    beam,
    max_len,
    no_repeat,
    length_normalize,
    phrase_mode,
    emit_per_state,
    workers,
    seed,
    out,
):
    """Decode each input under the constraint spec; write JSONL results in
    input order."""
    del seed  # decoding has no stochastic choices
    scorer, vocab = _resolve_scorer(scorer_kind, model)
    spec = _load_spec(constraints, lemmas, vocab)
    params = _search_params(beam, max_len, no_repeat, length_normalize)
    items = _read_inputs(inputs)
    tasks = list(enumerate(items))
    if workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {workers}")
    if workers == 1 or len(tasks) == 1:
        _decode_one_setup(scorer, vocab, spec, params, phrase_mode, emit_per_state)
        produced = [_decode_one(t) for t in tasks]
    else:
        with multiprocessing.Pool(
            processes=workers,
            initializer=_decode_one_setup,
            initargs=(scorer, vocab, spec, params, phrase_mode, emit_per_state),
        ) as pool:
            produced = pool.map(_decode_one, tasks)
    produced.sort(key=lambda pair: pair[0])
    _write_lines([line for _, line in produced], out)


@cli.command()
@click.option("--scorer", "scorer_kind", type=_SCORER_CHOICE, default="ngram", show_default=True)
@click.option("--model", type=click.Path(exists=True, dir_okay=False))
@click.option("--inputs", type=click.Path(exists=True, dir_okay=False))
@click.option("--constraints", type=click.Path(exists=True, dir_okay=False))
@click.option("--lemmas", type=click.Path(exists=True, dir_okay=False))
@click.option("--max-len", default=6, show_default=True)
@click.option("--no-repeat/--allow-repeat", default=True, show_default=True)
@click.option("--limit", default=2_000_000, show_default=True, help="enumeration budget")
@click.option("--out", type=click.Path(dir_okay=False))
def oracle(scorer_kind, model, inputs, constraints, lemmas, max_len, no_repeat, limit, out):
    """Exhaustive filtered-argmax decode for tiny instances: enumerate every
    sequence up to --max-len and keep the best one the FSM accepts."""
    scorer, vocab = _resolve_scorer(scorer_kind, model)
    spec = _load_spec(constraints, lemmas, vocab)
    if spec is None or spec.empty:
        machine = fsm_mod.trivial_fsm(len(vocab))
    else:
        machine = fsm_mod.compile_spec(spec, vocab)
    params = _search_params(5, max_len, no_repeat, False)
    lines = []
    for index, item in enumerate(_read_inputs(inputs)):
        conditioning = None
        if "features" in item:
            conditioning = np.asarray(item["features"], dtype=np.float64)
        result = exhaustive_decode(scorer, machine, params, conditioning, limit=limit)
        line = {"id": item.get("id", index)}
        line.update(result.to_dict(vocab))
        lines.append(json.dumps(line))
    _write_lines(lines, out)


@cli.command("train-ngram")
@click.argument("corpus", type=click.Path(exists=True, dir_okay=False))
@click.option("--order", default=2, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_ngram(corpus, order, alpha, out):
    """Train an additive-smoothing n-gram scorer from a plain-text corpus."""
    sequences, vocab = scorers.load_corpus(corpus)
    model = scorers.ngram_train(sequences, order=order, alpha=alpha, vocab=vocab)
    model.save(out)
    logger.info("trained order-%d model over %d tokens", order, len(vocab))


def _read_conditioning(path: str | None, count: int, cond_dim: int) -> list[np.ndarray | None]:
    if path is None:
        return [None] * count
    rows: list[np.ndarray | None] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            vec = np.asarray(obj["features"], dtype=np.float64)
            if vec.shape != (cond_dim,):
                raise DataError(
                    f"{path}:{lineno}: conditioning vector has {vec.shape[0]} "
                    f"values, expected {cond_dim}"
                )
            rows.append(vec)
    if len(rows) != count:
        raise DataError(
            f"{path} has {len(rows)} conditioning vectors for {count} corpus sentences"
        )
    return rows


@cli.command("train-lm")
@click.argument("corpus", type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", "embeddings_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--conditioning", type=click.Path(exists=True, dir_okay=False))
@click.option("--hidden", default=32, show_default=True)
@click.option("--cond-dim", default=2, show_default=True)
@click.option("--epochs", default=200, show_default=True)
@click.option("--lr", default=0.3, show_default=True)
@click.option("--batch-size", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_lm(corpus, embeddings_path, conditioning, hidden, cond_dim, epochs, lr, batch_size, seed, out):
    """Train the caption LSTM on a plain-text corpus with frozen file-supplied
    embeddings."""
    sequences, vocab = scorers.load_corpus(corpus)
    table, missing = emb.load_embeddings(embeddings_path, needed=vocab.tokens)
    if missing:
        raise DataError(f"{len(missing)} vocabulary words have no embedding: {missing[:20]}")
    rng = np.random.default_rng(seed)
    model = emb.build_caption_model(vocab, table, hidden, cond_dim, rng=rng)
    conds = _read_conditioning(conditioning, len(sequences), cond_dim)
    pairs = list(zip(sequences, conds))
    report = neural.train(
        model, pairs, lr=lr, epochs=epochs, batch_size=batch_size, seed=seed, log_every=25
    )
    neural.save_checkpoint(model, out, seed=seed)
    logger.info(
        "loss %.4f -> %.4f over %d epochs", report.initial, report.final, epochs
    )


@cli.command()
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", "embeddings_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def expand(model, embeddings_path, manifest, out):
    """Apply an expansion manifest: append each word's embedding column and
    write the expanded checkpoint."""
    caption_model = neural.load_checkpoint(model)
    words = emb.load_expansion_manifest(manifest)
    table, missing = emb.load_embeddings(embeddings_path, needed=words)
    if missing:
        raise DataError(f"manifest words missing from the embedding file: {missing}")
    caption_model, records = emb.apply_expansion_manifest(caption_model, words, table)
    neural.save_checkpoint(caption_model, out)
    click.echo(
        json.dumps(
            {"expanded": [{"word": r.word, "token_id": r.token_id} for r in records]}
        )
    )


def _read_generated(path: str) -> list[tuple[str, ...]]:
    """Decode JSONL (uses the `text` field) or plain text, one caption per line."""
    captions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                obj = json.loads(line)
                if "text" not in obj:
                    raise DataError("decode JSONL line lacks a 'text' field")
                captions.append(tuple(tokenize(obj["text"])))
            else:
                captions.append(tuple(tokenize(line)))
    return captions


def _read_references(path: str) -> list[tuple[tuple[str, ...], ...]]:
    refs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict) or "references" not in obj:
                raise DataError(f"{path}:{lineno}: expected {{\"references\": [...]}}")
            refs.append(tuple(tuple(tokenize(r)) for r in obj["references"]))
    return refs


@cli.command("eval-f1")
@click.option("--generated", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--references", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mentions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
def eval_f1(generated, references, mentions, out):
    """Mention F1 of generated captions against references, per object and
    macro-averaged."""
    gen = _read_generated(generated)
    refs = _read_references(references)
    if len(gen) != len(refs):
        raise DataError(f"{len(gen)} generated captions but {len(refs)} reference rows")
    pairs = [metrics.EvalPair(g, r) for g, r in zip(gen, refs)]
    specs = metrics.load_mention_specs(mentions)
    report = metrics.macro_f1([(spec, pairs) for spec in specs])
    _write_json(report.to_dict(), out)


def _emit_error(category: str, message: str, code: int) -> None:
    payload = {"error": {"category": category, "message": message, "exit_code": code}}
    print(json.dumps(payload), file=sys.stderr)


def _configure_logging() -> None:
    level = os.environ.get("CBSDECODE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.exceptions.Abort:
        return 1
    except _UnknownCommand as e:
        _emit_error("unknown-command", f"no such command: {e}", EXIT_UNKNOWN_COMMAND)
        return EXIT_UNKNOWN_COMMAND
    except click.UsageError as e:
        _emit_error("config", e.format_message(), EXIT_CONFIG)
        return EXIT_CONFIG
    except click.ClickException as e:
        _emit_error("config", e.format_message(), EXIT_CONFIG)
        return EXIT_CONFIG
    except (ConfigError, CapacityError) as e:
        _emit_error("config", str(e), EXIT_CONFIG)
        return EXIT_CONFIG
    except NumericError as e:
        _emit_error("numeric", str(e), EXIT_NUMERIC)
        return EXIT_NUMERIC
    except CbsError as e:
        _emit_error("data", str(e), EXIT_DATA)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
