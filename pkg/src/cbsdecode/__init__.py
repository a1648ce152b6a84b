"""Constrained sequence decoding: FSM-compiled constraints, multi-beam search
over pluggable scorers, and open-vocabulary expansion on an embedding-tied
neural language model."""

from .embeddings import (
    EmbeddingTable,
    ExpansionRecord,
    expand_vocab,
    load_embeddings,
    nearest_neighbors,
)
from .errors import (
    CapacityError,
    CbsError,
    ConfigError,
    ConstraintError,
    ContractError,
    DataError,
    DecodeError,
    NumericError,
)
from .fsm import (
    ConstraintSpec,
    DisjunctiveConstraints,
    Fsm,
    LemmaMap,
    PhraseConstraint,
    compile_disjunctions,
    compile_phrase,
    compile_spec,
    expand_lemmas,
    intersect,
    load_constraint_spec,
    recognizes,
    step,
    trivial_fsm,
)
from .metrics import EvalPair, F1Score, MentionSpec, f1_mentions, macro_f1, satisfaction_rate
from .neural import (
    CaptionModel,
    LstmLayerParams,
    gradients,
    load_checkpoint,
    lstm_step,
    save_checkpoint,
    sequence_loss,
    train,
)
from .scorers import (
    DecodeState,
    NGramModel,
    Scorer,
    UniformScorer,
    load_corpus,
    ngram_logprob,
    ngram_train,
    score_step,
    sequence_logprob,
)
from .search import (
    BeamSet,
    DecodeResult,
    Hypothesis,
    SearchParams,
    beam_search,
    constrained_beam_search,
    decode_multi_phrase,
    exhaustive_decode,
)
from .vocab import Vocabulary, tokenize

__version__ = "0.1.0"

__all__ = [
    "BeamSet",
    "CaptionModel",
    "CapacityError",
    "CbsError",
    "ConfigError",
    "ConstraintError",
    "ConstraintSpec",
    "ContractError",
    "DataError",
    "DecodeError",
    "DecodeResult",
    "DecodeState",
    "DisjunctiveConstraints",
    "EmbeddingTable",
    "EvalPair",
    "ExpansionRecord",
    "F1Score",
    "Fsm",
    "Hypothesis",
    "LemmaMap",
    "LstmLayerParams",
    "MentionSpec",
    "NGramModel",
    "NumericError",
    "PhraseConstraint",
    "Scorer",
    "SearchParams",
    "UniformScorer",
    "Vocabulary",
    "beam_search",
    "compile_disjunctions",
    "compile_phrase",
    "compile_spec",
    "constrained_beam_search",
    "decode_multi_phrase",
    "exhaustive_decode",
    "expand_lemmas",
    "expand_vocab",
    "f1_mentions",
    "gradients",
    "intersect",
    "load_checkpoint",
    "load_constraint_spec",
    "load_corpus",
    "load_embeddings",
    "lstm_step",
    "macro_f1",
    "nearest_neighbors",
    "ngram_logprob",
    "ngram_train",
    "recognizes",
    "satisfaction_rate",
    "save_checkpoint",
    "score_step",
    "sequence_logprob",
    "sequence_loss",
    "step",
    "tokenize",
    "train",
    "trivial_fsm",
]
