"""Self-contained retrieval baselines: TF-IDF, BM25, reciprocal-rank fusion,
and the encoder-similarity ranker.

The corpora here are already token-id sequences, so lexical statistics treat
each token id as a term; no text tokenizer is involved.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import ModelWeights
from .pool import PooledIndex
from .retrieval import Selection, initial_selection, select_top_n


@dataclass
class LexicalIndex:
    doc_freq: Counter                 # term -> number of chunks containing it
    term_freqs: list                  # per chunk: Counter of term counts
    doc_lens: np.ndarray              # per chunk: token count
    M: int
    avgdl: float


def build_lexical_index(token_seqs: list) -> LexicalIndex:
    term_freqs = [Counter(int(t) for t in seq) for seq in token_seqs]
    doc_freq = Counter()
    for tf in term_freqs:
        doc_freq.update(tf.keys())
    doc_lens = np.array([len(seq) for seq in token_seqs], dtype=np.float64)
    if len(token_seqs) == 0:
        raise DataError("cannot index an empty corpus")
    return LexicalIndex(doc_freq=doc_freq, term_freqs=term_freqs, doc_lens=doc_lens,
                        M=len(token_seqs), avgdl=float(doc_lens.mean()))


def tfidf_rank(question_tokens, index: LexicalIndex, k: int) -> Selection:
    """Cosine similarity of tf*idf vectors, idf = ln(M / (1 + df))."""
    q_tf = Counter(int(t) for t in question_tokens)
    idf = {t: math.log(index.M / (1.0 + index.doc_freq.get(t, 0))) for t in q_tf}
    q_vec = {t: tf * idf[t] for t, tf in q_tf.items()}
    q_norm = math.sqrt(sum(w * w for w in q_vec.values()))

    scores = np.zeros(index.M)
    for i, tf in enumerate(index.term_freqs):
        doc_norm = math.sqrt(sum(
            (c * math.log(index.M / (1.0 + index.doc_freq[t]))) ** 2
            for t, c in tf.items()))
        if doc_norm == 0 or q_norm == 0:
            continue
        dot = sum(w * tf[t] * idf[t] for t, w in q_vec.items() if t in tf)
        scores[i] = dot / (q_norm * doc_norm)
    return select_top_n(scores, k)


def bm25_rank(question_tokens, index: LexicalIndex, k: int,
              k1: float = 1.2, b: float = 0.75) -> Selection:
    """Okapi scoring, idf = ln((M - df + 0.5) / (df + 0.5) + 1), over unique query terms."""
    terms = sorted(set(int(t) for t in question_tokens))
    scores = np.zeros(index.M)
    for t in terms:
        df = index.doc_freq.get(t, 0)
        if df == 0:
            continue
        idf = math.log((index.M - df + 0.5) / (df + 0.5) + 1.0)
        for i, tf in enumerate(index.term_freqs):
            f = tf.get(t, 0)
            if f == 0:
                continue
            denom = f + k1 * (1.0 - b + b * index.doc_lens[i] / index.avgdl)
            scores[i] += idf * f * (k1 + 1.0) / denom
    return select_top_n(scores, k)


def rrf_fuse(rankings: list[Selection], k: int, k_rrf: float = 60.0) -> Selection:
    """Reciprocal-rank fusion: score(c) = sum over rankings of 1/(k_rrf + rank(c)),
    ranks 1-based, absent chunks contribute nothing."""
    if not rankings:
        raise DataError("rrf_fuse needs at least one ranking")
    fused: dict[int, float] = {}
    for ranking in rankings:
        for rank, chunk in enumerate(ranking, start=1):
            fused[chunk] = fused.get(chunk, 0.0) + 1.0 / (k_rrf + rank)
    order = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return Selection(tuple(chunk for chunk, _ in order[:k]))


def encoder_maxsim_rank(weights: ModelWeights, question_tokens,
                        pooled_index: PooledIndex, k: int, **kwargs) -> Selection:
    """The initial-selection scorer surfaced as a named baseline."""
    _, selection = initial_selection(weights, question_tokens, pooled_index, k, **kwargs)
    return selection
