"""Fixed pretrained word embeddings: file ingestion, binding to a model
vocabulary, and test-time vocabulary expansion by column concatenation.

The text format is one entry per line, `word v1 v2 ... vD`, space-separated
UTF-8 (the layout used by the common 300-dimensional pretrained tables, which
can run to millions of lines, hence the streaming parse). Words are matched
after lower-casing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .neural import CaptionModel
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


class EmbeddingTable:
    """Immutable word -> vector map; every vector has the same dimension."""

    def __init__(self, dim: int, vectors: Mapping[str, np.ndarray]):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        for word, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise DataError(f"vector for {word!r} has shape {vec.shape}, expected ({dim},)")
            if not np.isfinite(vec).all():
                raise DataError(f"vector for {word!r} contains non-finite values")
            self.vectors[word] = vec

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, word: str) -> np.ndarray:
        try:
            return self.vectors[word.lower()]
        except KeyError:
            raise DataError(f"word {word!r} not in embedding table") from None


def load_embeddings(path, needed: Iterable[str] | None = None) -> tuple[EmbeddingTable, list[str]]:
    """Stream the file, keeping vectors for `needed` words (all words when
    None). Returns the table plus the sorted list of needed words that were
    missing. Every line is checked for a consistent value count; a malformed
    line raises with its line number."""
    wanted = None if needed is None else {w.lower() for w in needed}
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0].lower(), parts[1:]
            if dim is None:
                if not values:
                    raise DataError(f"{path}:{lineno}: entry has no values")
                dim = len(values)
            elif len(values) != dim:
                raise DataError(
                    f"{path}:{lineno}: expected {dim} values, found {len(values)}"
                )
            if wanted is not None and word not in wanted:
                continue
            try:
                vec = np.array([float(x) for x in values])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: bad float: {e}") from e
            if not np.isfinite(vec).all():
                raise DataError(f"{path}:{lineno}: non-finite value")
            vectors[word] = vec
    if dim is None:
        raise DataError(f"embedding file {path} is empty")
    table = EmbeddingTable(dim, vectors)
    missing = sorted(wanted - set(vectors)) if wanted is not None else []
    if missing:
        logger.warning("%d needed words missing from %s: %s", len(missing), path, missing[:20])
    return table, missing


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Inverse of load_embeddings; floats are written with full round-trip
    precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(table.vectors):
            values = " ".join(repr(float(x)) for x in table.vectors[word])
            fh.write(f"{word} {values}\n")


def embedding_matrix(vocab: Vocabulary, table: EmbeddingTable) -> np.ndarray:
    """Stack the table's vectors as columns in vocabulary order. Words missing
    from the table are a hard error: silently substituting random vectors
    would break the tied output layer."""
    missing = [w for w in vocab.tokens if w not in table]
    if missing:
        raise DataError(
            f"{len(missing)} vocabulary words have no embedding: {missing[:20]}"
        )
    return np.stack([table[w] for w in vocab.tokens], axis=1)


def build_caption_model(
    vocab: Vocabulary,
    table: EmbeddingTable,
    hidden_size: int,
    cond_dim: int,
    rng: np.random.Generator | None = None,
    **kwargs,
) -> CaptionModel:
    """Fresh caption model with its embedding columns taken from the table."""
    return CaptionModel.build(
        vocab, embedding_matrix(vocab, table), hidden_size, cond_dim, rng=rng, **kwargs
    )


def expand_vocab(m: CaptionModel, word: str, vec: np.ndarray) -> tuple[CaptionModel, int]:
    """Append `vec` as a new embedding column for `word`.

    The vocabulary gains the word at the next dense id; the output logit
    vector and the one-hot input dimension grow by one; no other parameter
    changes, so pre-existing logits are bit-identical before and after.
    """
    word = word.lower()
    if word in m.vocab:
        raise DataError(f"cannot expand: {word!r} already in vocabulary")
    expanded = m.with_expanded_column(word, vec)
    return expanded, expanded.vocab.id(word)


@dataclass(frozen=True)
class ExpansionRecord:
    """One applied vocabulary expansion, in application order."""

    word: str
    token_id: int
    order: int


def apply_expansion_manifest(
    m: CaptionModel, words: Sequence[str], table: EmbeddingTable
) -> tuple[CaptionModel, list[ExpansionRecord]]:
    """Expand the model with each word's table vector, in manifest order.
    A word missing from the table is an error (no fallback initialization)."""
    records = []
    for order, word in enumerate(words):
        m, token_id = expand_vocab(m, word, table[word])
        records.append(ExpansionRecord(word=word.lower(), token_id=token_id, order=order))
    return m, records


def load_expansion_manifest(path) -> list[str]:
    """Manifest format: JSON list of {"word": ..., "source": "embedding-file"}."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"invalid expansion manifest {path}: {e}") from e
    if not isinstance(data, list):
        raise DataError("expansion manifest must be a JSON list")
    words = []
    for entry in data:
        if not isinstance(entry, dict) or "word" not in entry:
            raise DataError(f"manifest entry missing 'word': {entry!r}")
        words.append(str(entry["word"]).lower())
    return words


def nearest_neighbors(t: EmbeddingTable, word: str, k: int) -> list[tuple[str, float]]:
    """Top-k table words by cosine similarity to `word`, excluding the query.
    Deterministic: ties are broken lexicographically. Zero vectors have
    similarity 0 to everything."""
    query = t[word]
    qnorm = float(np.linalg.norm(query))
    out = []
    for other in t.vectors:
        if other == word.lower():
            continue
        vec = t.vectors[other]
        denom = qnorm * float(np.linalg.norm(vec))
        sim = float(query @ vec / denom) if denom > 0 else 0.0
        out.append((other, sim))
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out[:k]
