"""Factored two-layer LSTM captioning model with an embedding-tied softmax.

The bottom LSTM layer consumes only the embedded previous word; the top layer
consumes the bottom layer's output concatenated with a per-timestep static
conditioning vector (the stand-in for externally computed image features).
Output logits are the dot products of a projected hidden vector with the
frozen input embedding columns, which is what makes test-time vocabulary
expansion a pure column concatenation.

Everything runs in 64-bit floats: forward pass, cross-entropy loss, analytic
backpropagation-through-time gradients, and a plain-SGD toy trainer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, NumericError
from .scorers import DecodeState, Scorer
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cbsdecode-caption-lm"
CHECKPOINT_VERSION = 1

GATES = ("i", "f", "o", "c")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted log-softmax; logits are never exponentiated raw."""
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class LstmLayerParams:
    """Weights of one LSTM layer: four input matrices (N x K), four recurrent
    matrices (N x N), and four bias vectors (N)."""

    w_xi: np.ndarray
    w_xf: np.ndarray
    w_xo: np.ndarray
    w_xc: np.ndarray
    w_hi: np.ndarray
    w_hf: np.ndarray
    w_ho: np.ndarray
    w_hc: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        n, k = self.w_xi.shape
        for gate in GATES:
            if getattr(self, f"w_x{gate}").shape != (n, k):
                raise DataError(f"w_x{gate} shape mismatch")
            if getattr(self, f"w_h{gate}").shape != (n, n):
                raise DataError(f"w_h{gate} shape mismatch")
            if getattr(self, f"b_{gate}").shape != (n,):
                raise DataError(f"b_{gate} shape mismatch")

    @property
    def hidden_size(self) -> int:
        return self.w_xi.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_xi.shape[1]

    @classmethod
    def build(
        cls,
        hidden_size: int,
        input_size: int,
        rng: np.random.Generator | None = None,
        init_scale: float = 0.08,
        forget_bias: float = 1.0,
    ) -> "LstmLayerParams":
        def weight(shape):
            if rng is None or init_scale == 0.0:
                return np.zeros(shape)
            return rng.uniform(-init_scale, init_scale, size=shape)

        fields = {}
        for gate in GATES:
            fields[f"w_x{gate}"] = weight((hidden_size, input_size))
            fields[f"w_h{gate}"] = weight((hidden_size, hidden_size))
            fields[f"b_{gate}"] = np.zeros(hidden_size)
        fields["b_f"] = np.full(hidden_size, float(forget_bias))
        return cls(**fields)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _LAYER_FIELDS}


_LAYER_FIELDS = tuple(
    f"{kind}{gate}" for kind in ("w_x", "w_h", "b_") for gate in GATES
)


def lstm_step(
    p: LstmLayerParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update: gates from sigmoid/tanh of affine maps of (x, h_prev),
    then c = f*c_prev + i*g and h = o*tanh(c). Pure."""
    h, c, _ = _lstm_forward(p, x, h_prev, c_prev)
    return h, c


def _lstm_forward(p, x, h_prev, c_prev):
    if x.shape != (p.input_size,) or h_prev.shape != (p.hidden_size,):
        raise DataError(
            f"lstm input shapes {x.shape}/{h_prev.shape} do not match "
            f"layer (N={p.hidden_size}, K={p.input_size})"
        )
    if not (np.isfinite(x).all() and np.isfinite(h_prev).all() and np.isfinite(c_prev).all()):
        raise NumericError("non-finite lstm input")
    i = _sigmoid(p.w_xi @ x + p.w_hi @ h_prev + p.b_i)
    f = _sigmoid(p.w_xf @ x + p.w_hf @ h_prev + p.b_f)
    o = _sigmoid(p.w_xo @ x + p.w_ho @ h_prev + p.b_o)
    g = np.tanh(p.w_xc @ x + p.w_hc @ h_prev + p.b_c)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def _lstm_backward(p, cache, dh, dc, grads: dict[str, np.ndarray], prefix: str):
    """Accumulate parameter gradients for one cached step; returns
    (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    d_pre = {
        "i": dc_total * g * i * (1.0 - i),
        "f": dc_total * c_prev * f * (1.0 - f),
        "o": do * o * (1.0 - o),
        "c": dc_total * i * (1.0 - g * g),
    }
    dx = np.zeros_like(x)
    dh_prev = np.zeros_like(h_prev)
    for gate, d in d_pre.items():
        grads[f"{prefix}.w_x{gate}"] += np.outer(d, x)
        grads[f"{prefix}.w_h{gate}"] += np.outer(d, h_prev)
        grads[f"{prefix}.b_{gate}"] += d
        dx += getattr(p, f"w_x{gate}").T @ d
        dh_prev += getattr(p, f"w_h{gate}").T @ d
    return dx, dh_prev, dc_total * f


class _NeuralState(DecodeState):
    __slots__ = ("h1", "c1", "h2", "c2", "cond")

    def __init__(self, owner, log_probs, h1, c1, h2, c2, cond):
        super().__init__(owner, log_probs)
        self.h1, self.c1, self.h2, self.c2 = h1, c1, h2, c2
        self.cond = cond


class CaptionModel(Scorer):
    """Two-layer factored LSTM over a fixed embedding matrix.

    w_e holds one embedding column per vocabulary word and is frozen: training
    never touches it, and expanding the vocabulary appends a column. The
    start-of-sequence input uses a dedicated reserved embedding column, not a
    vocabulary word.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        w_e: np.ndarray,
        layer1: LstmLayerParams,
        layer2: LstmLayerParams,
        w_v: np.ndarray,
        b_v: np.ndarray,
        start_embedding: np.ndarray | None = None,
    ):
        d, v = w_e.shape
        if v != len(vocab):
            raise DataError(f"embedding matrix has {v} columns for |V|={len(vocab)}")
        if layer1.input_size != d:
            raise DataError("layer1 input size must equal the embedding dimension")
        n = layer1.hidden_size
        if layer2.input_size < n:
            raise DataError("layer2 input must cover layer1 output plus conditioning")
        if w_v.shape != (d, layer2.hidden_size) or b_v.shape != (d,):
            raise DataError("output projection shape mismatch")
        self.vocab = vocab
        self.w_e = w_e.astype(np.float64, copy=False)
        self.layer1 = layer1
        self.layer2 = layer2
        self.w_v = w_v
        self.b_v = b_v
        self.start_embedding = (
            np.zeros(d) if start_embedding is None else start_embedding.astype(np.float64)
        )
        if self.start_embedding.shape != (d,):
            raise DataError("start embedding dimension mismatch")

    # dimensions

    @property
    def embed_dim(self) -> int:
        return self.w_e.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.layer1.hidden_size

    @property
    def cond_dim(self) -> int:
        return self.layer2.input_size - self.layer1.hidden_size

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos(self) -> int:
        return self.vocab.eos

    @classmethod
    def build(
        cls,
        vocab: Vocabulary,
        w_e: np.ndarray,
        hidden_size: int,
        cond_dim: int,
        rng: np.random.Generator | None = None,
        init_scale: float = 0.08,
        forget_bias: float = 1.0,
        start_embedding: np.ndarray | None = None,
    ) -> "CaptionModel":
        """Fresh model around a fixed embedding matrix. Trainable weights are
        uniform in [-init_scale, init_scale]; forget-gate biases start at
        `forget_bias`, all other biases at zero."""
        d = w_e.shape[0]

        def weight(shape):
            if rng is None or init_scale == 0.0:
                return np.zeros(shape)
            return rng.uniform(-init_scale, init_scale, size=shape)

        layer1 = LstmLayerParams.build(hidden_size, d, rng, init_scale, forget_bias)
        layer2 = LstmLayerParams.build(
            hidden_size, hidden_size + cond_dim, rng, init_scale, forget_bias
        )
        return cls(
            vocab=vocab,
            w_e=w_e,
            layer1=layer1,
            layer2=layer2,
            w_v=weight((d, hidden_size)),
            b_v=np.zeros(d),
            start_embedding=start_embedding,
        )

    def trainable(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array. w_e is deliberately
        absent: the embeddings are fixed."""
        out = {}
        for prefix, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            for name, arr in layer.arrays().items():
                out[f"{prefix}.{name}"] = arr
        out["w_v"] = self.w_v
        out["b_v"] = self.b_v
        return out

    # forward pass

    def _output_logits(self, v: np.ndarray) -> np.ndarray:
        # tied output layer: one logit per embedding column. einsum keeps each
        # column's reduction order independent of the column count, so
        # expanding the vocabulary leaves pre-existing logits bit-identical
        # (BLAS matmul does not guarantee that)
        return np.einsum("dv,d->v", self.w_e, v)

    def output_logits(self, state: "_NeuralState") -> np.ndarray:
        """Raw tied-output logits pending at `state` (pre-softmax)."""
        return self._output_logits(np.tanh(self.w_v @ state.h2 + self.b_v))

    def _input_embedding(self, prev: int | None) -> np.ndarray:
        if prev is None:
            return self.start_embedding
        if not 0 <= prev < self.vocab_size:
            raise ContractError(f"token id {prev} out of range for |V|={self.vocab_size}")
        return self.w_e[:, prev]

    def _forward_one(self, prev, h1, c1, h2, c2, cond, want_cache=False):
        x1 = self._input_embedding(prev)
        h1n, c1n, cache1 = _lstm_forward(self.layer1, x1, h1, c1)
        x2 = np.concatenate([h1n, cond])
        h2n, c2n, cache2 = _lstm_forward(self.layer2, x2, h2, c2)
        a = self.w_v @ h2n + self.b_v
        v = np.tanh(a)
        logp = log_softmax(self._output_logits(v))
        if not np.isfinite(logp).all():
            raise NumericError("model emitted a non-finite log distribution")
        cache = (cache1, cache2, v) if want_cache else None
        return h1n, c1n, h2n, c2n, logp, cache

    def _check_conditioning(self, conditioning) -> np.ndarray:
        if conditioning is None:
            return np.zeros(self.cond_dim)
        cond = np.asarray(conditioning, dtype=np.float64)
        if cond.shape != (self.cond_dim,):
            raise DataError(
                f"conditioning vector has shape {cond.shape}, expected ({self.cond_dim},)"
            )
        if not np.isfinite(cond).all():
            raise DataError("conditioning vector contains non-finite values")
        return cond

    def initial_state(self, conditioning=None) -> _NeuralState:
        cond = self._check_conditioning(conditioning)
        n = self.hidden_size
        z = np.zeros(n)
        h1, c1, h2, c2, logp, _ = self._forward_one(None, z, z, z, z, cond)
        return _NeuralState(self, logp, h1, c1, h2, c2, cond)

    def _advance(self, state: _NeuralState, token: int) -> _NeuralState:
        h1, c1, h2, c2, logp, _ = self._forward_one(
            token, state.h1, state.c1, state.h2, state.c2, state.cond
        )
        return _NeuralState(self, logp, h1, c1, h2, c2, state.cond)

    def _unrolled(self, seq: Sequence[int], cond: np.ndarray, want_cache: bool):
        """Teacher-forced pass over the whole sequence: the input at step t is
        the ground-truth token t-1 (start column at t=0)."""
        n = self.hidden_size
        h1 = c1 = h2 = c2 = np.zeros(n)
        logps, caches = [], []
        prev: int | None = None
        for y in seq:
            h1, c1, h2, c2, logp, cache = self._forward_one(
                prev, h1, c1, h2, c2, cond, want_cache=want_cache
            )
            logps.append(logp)
            caches.append(cache)
            prev = int(y)
        return logps, caches

    def sequence_loss(self, seq: Sequence[int], conditioning=None) -> float:
        """Mean over timesteps of the negative log probability of the next
        ground-truth token (softmax cross-entropy, teacher forcing)."""
        if len(seq) == 0:
            raise DataError("cannot score an empty sequence")
        cond = self._check_conditioning(conditioning)
        logps, _ = self._unrolled(seq, cond, want_cache=False)
        return -float(np.mean([logp[y] for logp, y in zip(logps, seq)]))

    def _sequence_gradients(self, seq, cond, grads):
        logps, caches = self._unrolled(seq, cond, want_cache=True)
        T = len(seq)
        n = self.hidden_size
        dh1n = dc1n = dh2n = dc2n = np.zeros(n)
        loss = 0.0
        for t in reversed(range(T)):
            cache1, cache2, v = caches[t]
            y = seq[t]
            loss -= float(logps[t][y])
            dlogits = np.exp(logps[t])
            dlogits[y] -= 1.0
            dlogits /= T
            dv = self.w_e @ dlogits
            da = dv * (1.0 - v * v)
            grads["w_v"] += np.outer(da, self._h2_from_cache(cache2))
            grads["b_v"] += da
            dh2 = self.w_v.T @ da + dh2n
            dx2, dh2n, dc2n = _lstm_backward(self.layer2, cache2, dh2, dc2n, grads, "layer2")
            dh1 = dx2[:n] + dh1n
            _, dh1n, dc1n = _lstm_backward(self.layer1, cache1, dh1, dc1n, grads, "layer1")
        return loss / T

    @staticmethod
    def _h2_from_cache(cache2):
        # h2 = o * tanh(c); both live in the cache
        _, _, _, _, _, o, _, tc = cache2
        return o * tc

    def gradients(self, batch: Sequence[tuple[Sequence[int], np.ndarray | None]]):
        """Analytic BPTT gradients of the mean sequence loss over the batch,
        for every trainable parameter. Returns (grads, mean_loss).

        The frozen embedding matrix has no gradient by construction.
        """
        if not batch:
            raise DataError("empty gradient batch")
        grads = {name: np.zeros_like(arr) for name, arr in self.trainable().items()}
        total = 0.0
        for seq, conditioning in batch:
            if len(seq) == 0:
                raise DataError("cannot score an empty sequence")
            cond = self._check_conditioning(conditioning)
            total += self._sequence_gradients(seq, cond, grads)
        scale = 1.0 / len(batch)
        for name, g in grads.items():
            g *= scale
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        return grads, total * scale

    # vocabulary expansion support (driven by the embeddings module)

    def with_expanded_column(self, word: str, vec: np.ndarray) -> "CaptionModel":
        """New model whose embedding matrix gains `vec` as the column for
        `word`; every other parameter is shared unchanged."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.embed_dim,):
            raise DataError(
                f"expansion vector has shape {vec.shape}, expected ({self.embed_dim},)"
            )
        if not np.isfinite(vec).all():
            raise DataError(f"expansion vector for {word!r} contains non-finite values")
        return CaptionModel(
            vocab=self.vocab.extended(word),
            w_e=np.concatenate([self.w_e, vec[:, None]], axis=1),
            layer1=self.layer1,
            layer2=self.layer2,
            w_v=self.w_v,
            b_v=self.b_v,
            start_embedding=self.start_embedding,
        )


def sequence_loss(m: CaptionModel, seq: Sequence[int], conditioning=None) -> float:
    """Module-level alias for :meth:`CaptionModel.sequence_loss`."""
    return m.sequence_loss(seq, conditioning)


def gradients(m: CaptionModel, batch) -> dict[str, np.ndarray]:
    """Module-level alias returning only the gradient set."""
    return m.gradients(batch)[0]


@dataclass
class TrainReport:
    """Per-epoch mean losses; entry 0 is the pre-update loss."""

    losses: list[float]

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def train(
    m: CaptionModel,
    corpus: Sequence[tuple[Sequence[int], np.ndarray | None]],
    lr: float | Callable[[int], float],
    epochs: int,
    batch_size: int = 1,
    shuffle: bool = True,
    seed: int = 0,
    log_every: int | None = None,
) -> TrainReport:
    """Plain SGD on BPTT gradients, in place. The embedding matrix is never
    updated. Deterministic for a fixed seed: shuffling is the only stochastic
    choice and it flows from one seeded generator."""
    if not corpus:
        raise DataError("empty training corpus")
    if epochs < 0 or batch_size < 1:
        raise DataError("epochs must be >= 0 and batch_size >= 1")
    rate = lr if callable(lr) else (lambda _epoch: lr)
    rng = np.random.default_rng(seed)
    params = m.trainable()

    def mean_loss() -> float:
        return float(
            np.mean([m.sequence_loss(seq, cond) for seq, cond in corpus])
        )

    losses = [mean_loss()]
    for epoch in range(epochs):
        step_lr = float(rate(epoch))
        order = rng.permutation(len(corpus)) if shuffle else np.arange(len(corpus))
        for lo in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[lo : lo + batch_size]]
            grads, _ = m.gradients(batch)
            for name, arr in params.items():
                arr -= step_lr * grads[name]
        epoch_loss = mean_loss()
        if not np.isfinite(epoch_loss):
            raise NumericError(
                f"training diverged at epoch {epoch} (loss={epoch_loss}, lr={step_lr})"
            )
        losses.append(epoch_loss)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d: mean loss %.4f", epoch + 1, epoch_loss)
    return TrainReport(losses)


# checkpointing


def save_checkpoint(m: CaptionModel, path, seed: int | None = None) -> None:
    """Versioned binary container: shapes, every parameter tensor, the
    vocabulary, and the frozen-embedding flag."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vocab": list(m.vocab.tokens),
        "eos": m.vocab.tokens[m.vocab.eos],
        "embed_dim": m.embed_dim,
        "hidden_size": m.hidden_size,
        "cond_dim": m.cond_dim,
        "frozen_embeddings": True,
        "seed": seed,
    }
    arrays = {"w_e": m.w_e, "start_embedding": m.start_embedding}
    arrays.update(m.trainable())
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> CaptionModel:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    with data:
        if "__meta__" not in data:
            raise DataError(f"{path} is not a caption model checkpoint")
        meta = json.loads(str(data["__meta__"][()]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not a caption model checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        vocab = Vocabulary(meta["vocab"], eos_token=meta["eos"])

        def layer(prefix: str) -> LstmLayerParams:
            return LstmLayerParams(
                **{name: data[f"{prefix}.{name}"] for name in _LAYER_FIELDS}
            )

        return CaptionModel(
            vocab=vocab,
            w_e=data["w_e"],
            layer1=layer("layer1"),
            layer2=layer("layer2"),
            w_v=data["w_v"],
            b_v=data["b_v"],
            start_embedding=data["start_embedding"],
        )
