"""Independent brute-force reference implementations used as test oracles.

Nothing here reuses the package's decoding or automaton paths: constraint
checks are direct set-membership and substring scans, sequence scores are
chain-rule sums of individually queried conditionals, and the argmax is a
full enumeration.
"""

import itertools
import math


def satisfies_disjunctions(seq, sets) -> bool:
    """Direct membership check: every set shares a token with the sequence."""
    present = set(seq)
    return all(present & set(d) for d in sets)


def contains_phrase(seq, phrase) -> bool:
    """Direct substring scan."""
    seq, phrase = tuple(seq), tuple(phrase)
    n = len(phrase)
    return any(seq[i : i + n] == phrase for i in range(len(seq) - n + 1))


def all_sequences(alphabet, max_len):
    """Every tuple over `alphabet` of length 0..max_len."""
    for length in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=length)


def terminated_sequences(vocab_size, eos, max_len, no_repeat=True):
    """Every candidate decoder output: ends with eos, eos nowhere else,
    total length <= max_len, optionally without immediate repeats."""
    others = [w for w in range(vocab_size) if w != eos]
    for length in range(max_len):
        for prefix in itertools.product(others, repeat=length):
            seq = prefix + (eos,)
            if no_repeat and any(a == b for a, b in zip(seq, seq[1:])):
                continue
            yield seq


def ngram_sequence_logprob(model, seq) -> float:
    """Chain-rule sum via direct conditional queries, no decode states."""
    total = 0.0
    context = []
    for w in seq:
        total += model.logprob(context, w)
        context.append(w)
    return total


def filtered_argmax(model, eos, max_len, accepts, no_repeat=True):
    """Best accepted terminated sequence under (logprob desc, length asc,
    lexicographic) order, or None when nothing is accepted."""
    best_key, best = None, None
    for seq in terminated_sequences(model.vocab_size, eos, max_len, no_repeat):
        if not accepts(seq):
            continue
        key = (-ngram_sequence_logprob(model, seq), len(seq), seq)
        if best_key is None or key < best_key:
            best_key, best = key, seq
    if best is None:
        return None
    return best, -best_key[0]


def greedy_decode(scorer, max_len, no_repeat=True, conditioning=None):
    """Stepwise argmax with no-repeat filtering; ties go to the lowest id.
    Returns (tokens, logprob); tokens may lack eos if the budget ran out."""
    state = scorer.initial_state(conditioning)
    tokens: list[int] = []
    total = 0.0
    for _ in range(max_len):
        dist = state.log_probs.copy()
        if no_repeat and tokens:
            dist[tokens[-1]] = -math.inf
        w = int(dist.argmax())
        total += float(dist[w])
        tokens.append(w)
        if w == scorer.eos:
            break
        state, _ = scorer.step(state, w)
    return tuple(tokens), total
