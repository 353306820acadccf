"""State-tracking task data: symmetric-group word problems, the
vector-RNN embedding check, and a synthetic byte corpus for the
character-LM smoke experiments.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .baselines import vector_rnn_forward
from .recurrence import ConfigError, RecurrenceInputs, m2rnn_forward


# --- symmetric group word problem --------------------------------------------

def sk_permutations(k):
    """All permutations of range(k) in lexicographic order."""
    if not 2 <= k <= 5:
        raise ConfigError(f"k must be in 2..5, got {k}")
    return [np.array(p) for p in itertools.permutations(range(k))]


def compose_perms(p, q):
    """Apply p, then q: (p;q)[i] = q[p[i]]."""
    return q[p]


def sk_group_table(k):
    """table[a][b] = index of the composition a;b over lexicographic perms."""
    perms = sk_permutations(k)
    order = len(perms)
    key = {tuple(p): i for i, p in enumerate(perms)}
    table = np.zeros((order, order), dtype=np.int64)
    for a in range(order):
        for b in range(order):
            table[a, b] = key[tuple(compose_perms(perms[a], perms[b]))]
    return table


@dataclass
class GroupSample:
    """tokens[t] is a generator index; labels[t] the running composition."""
    tokens: np.ndarray
    labels: np.ndarray


def gen_sk_sequences(k, length, count, seed):
    """Uniform generator sequences with running-composition labels."""
    table = sk_group_table(k)
    order = table.shape[0]
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, order, size=(count, length))
    labels = np.zeros_like(tokens)
    state = tokens[:, 0].copy()
    labels[:, 0] = state
    for t in range(1, length):
        state = table[state, tokens[:, t]]
        labels[:, t] = state
    return [GroupSample(tokens=tokens[i], labels=labels[i]) for i in range(count)]


def gen_sk_batch(k, length, count, seed):
    """Batch form of gen_sk_sequences: (tokens, labels) int arrays."""
    samples = gen_sk_sequences(k, length, count, seed)
    return (np.stack([s.tokens for s in samples]),
            np.stack([s.labels for s in samples]))


def labels_by_array_composition(k, tokens):
    """Second label oracle: compose permutation arrays directly, no table."""
    perms = sk_permutations(k)
    key = {tuple(p): i for i, p in enumerate(perms)}
    labels = np.zeros_like(tokens)
    for i in range(tokens.shape[0]):
        state = perms[tokens[i, 0]]
        labels[i, 0] = key[tuple(state)]
        for t in range(1, tokens.shape[1]):
            state = compose_perms(state, perms[tokens[i, t]])
            labels[i, t] = key[tuple(state)]
    return labels


# --- vector RNN embedding check ----------------------------------------------

def theorem_reduction_check(vector_rnn_params, t_len, seed):
    """Max |y_t - h_t| over the sequence for the recurrence configured to
    emulate a dense vector RNN.

    Construction: gate held at zero, residual off, q_t = k_t = e_1, the
    vector RNN input as the value stream, transition transposed to account
    for the row-vector orientation of the matrix state. The readout
    extracts the first state row, which carries the vector RNN exactly.
    """
    w = vector_rnn_params.w
    d = w.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, t_len, d))

    h_ref = vector_rnn_forward(vector_rnn_params, x)

    e1 = np.zeros((1, t_len, d))
    e1[:, :, 0] = 1.0
    inputs = RecurrenceInputs(
        q=e1, k=e1, v=x[:, :, None, :],
        f=np.zeros((1, t_len, 1)),
        h0=np.zeros((1, 1, d, d)),
        w=np.ascontiguousarray(w.T)[None, :, :],
    )
    y, _ = m2rnn_forward(inputs)
    return float(np.max(np.abs(y[:, :, 0, :] - h_ref)))


# --- synthetic byte corpus -----------------------------------------------------

_VOWELS = "aeiou"
_CONSONANTS = "bcdfghjklmnprstvwz"


def synthetic_text_corpus(n_bytes, seed, n_topics=4, words_per_topic=12):
    """Deterministic pseudo-text with sentence-level topic structure.

    Each sentence opens with a topic keyword and then draws only from that
    topic's vocabulary, so predicting well requires carrying the topic
    across the whole sentence.
    """
    rng = np.random.default_rng(seed)

    def make_word(lo=2, hi=4):
        n_syll = rng.integers(lo, hi + 1)
        return "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))]
                       + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(n_syll))

    topics = []
    for _ in range(n_topics):
        keyword = make_word(3, 4).upper()
        words = [make_word() for _ in range(words_per_topic)]
        topics.append((keyword, words))

    parts = []
    total = 0
    while total < n_bytes:
        keyword, words = topics[rng.integers(n_topics)]
        length = rng.integers(5, 10)
        sentence = keyword + " " + " ".join(
            words[rng.integers(len(words))] for _ in range(length)) + ".\n"
        parts.append(sentence)
        total += len(sentence)
    return "".join(parts).encode("ascii")[:n_bytes]
