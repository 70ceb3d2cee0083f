"""Synthetic multi-hop retrieval corpora.

The generator plants a controlled evidence structure into random token
chunks so that every capability of the pipeline has something real to find:

* each example owns `hops` oracle chunks; the question carries a few key
  tokens copied from every one of them, and key tokens are globally unique
  to their (example, hop), so lexical overlap is a real signal;
* inside an oracle chunk the keys sit in one contiguous run with every key
  doubled (evidence mentions its entities repeatedly); mean-pooled chunk
  rows therefore keep a usable key coefficient instead of diluting a lone
  token into the noise floor of the corpus;
* oracle chunks are written in a recognizable "evidence" style: a reserved
  marker sub-vocabulary is sprinkled through them. Distractors never carry
  markers, which gives trained probe queries a stylistic signal that plain
  encoder similarity does not exploit;
* key tokens are also copied into random distractor chunks ("pollution").
  The final hop is polluted at the full rate and earlier hops at half rate,
  and a few decoy distractors receive the final hop's complete doubled key
  run, which token overlap alone cannot tell apart from the true oracle;
* for multi-hop examples, bridge tokens appear in all oracle chunks of the
  example (and nowhere else), riding the same pooled rows as the key runs,
  so evidence seen in the decoder's context can vouch for evidence the
  question alone ranks poorly;
* the gold answer is a token span copied out of the last oracle chunk.

Everything is drawn from one seeded generator: the same spec yields
bit-identical corpora.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import QAExample
from .errors import DataError
from .pool import Chunk

N_MARKERS = 16          # size of the reserved evidence-style sub-vocabulary
QUESTION_BUDGET = 16    # max question tokens
ANSWER_LEN = 3
N_BRIDGE = 2            # bridge tokens per multi-hop example
KEY_COPIES = 2          # each key appears this many times in its oracle chunk
MIN_DISTRACTORS = 8


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seed: int = 0
    n_chunks: int = 640
    chunk_len: int = 16
    vocab_size: int = 2048
    n_examples: int = 96
    hops: int = 2
    key_tokens_per_oracle: int = 3
    distractor_overlap: float = 0.01   # fraction of distractors receiving each final-hop key
    train_fraction: float = 0.75

    def __post_init__(self):
        if self.hops not in (1, 2):
            raise DataError("hops must be 1 or 2")
        if self.hops * self.key_tokens_per_oracle > QUESTION_BUDGET:
            raise DataError(
                f"question needs {self.hops * self.key_tokens_per_oracle} key tokens, "
                f"budget is {QUESTION_BUDGET}")
        if not 0.0 <= self.distractor_overlap <= 1.0:
            raise DataError("distractor_overlap must lie in [0, 1]")


@dataclass
class SyntheticTask:
    chunks: list                     # list[Chunk], chunk_id == position
    train_examples: list             # list[QAExample]
    eval_examples: list
    meta: dict = field(default_factory=dict)


def _vocab_regions(spec: SyntheticTaskSpec):
    """[pad, eos][markers][keys+bridges][filler]; raises if the vocab is too small."""
    marker_lo = 2
    marker_hi = marker_lo + N_MARKERS
    n_keys = spec.n_examples * spec.hops * spec.key_tokens_per_oracle
    n_bridges = spec.n_examples * (N_BRIDGE if spec.hops > 1 else 0)
    key_lo = marker_hi
    key_hi = key_lo + n_keys + n_bridges
    if key_hi + 64 > spec.vocab_size:
        raise DataError(
            f"vocab_size={spec.vocab_size} too small: need {key_hi + 64} for "
            f"{n_keys} unique keys, {n_bridges} bridges, markers, and filler")
    return (marker_lo, marker_hi), (key_lo, key_hi), (key_hi, spec.vocab_size)


def generate_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    rng = np.random.default_rng(spec.seed)
    (marker_lo, marker_hi), (key_lo, key_hi), (filler_lo, filler_hi) = _vocab_regions(spec)

    n_oracles = spec.n_examples * spec.hops
    n_distractors = spec.n_chunks - n_oracles
    if n_distractors < MIN_DISTRACTORS:
        raise DataError(
            f"n_chunks={spec.n_chunks} cannot hold {n_oracles} oracle chunks plus at "
            f"least {MIN_DISTRACTORS} distractors; raise n_chunks or lower n_examples")
    n_bridge = N_BRIDGE if spec.hops > 1 else 0
    run_len = KEY_COPIES * spec.key_tokens_per_oracle + n_bridge
    n_marker_positions = max(2, spec.chunk_len // 3)
    if spec.chunk_len < run_len + n_marker_positions:
        raise DataError(
            f"chunk_len={spec.chunk_len} too short: the doubled key run plus bridges "
            f"needs {run_len} tokens and markers need {n_marker_positions} more")

    next_special = key_lo

    def take_special(n):
        nonlocal next_special
        out = np.arange(next_special, next_special + n, dtype=np.int64)
        next_special += n
        assert next_special <= key_hi
        return out

    def filler(n):
        return rng.integers(filler_lo, filler_hi, size=n, dtype=np.int64)

    def key_run(keys, bridges):
        """Contiguous doubled-key run, bridge tokens attached at the end."""
        return np.concatenate([np.repeat(keys, KEY_COPIES), bridges])

    def write_run(tokens, run):
        start = int(rng.integers(0, spec.chunk_len - len(run) + 1))
        tokens[start:start + len(run)] = run
        return np.arange(start, start + len(run))

    # oracle chunks first (ids 0..n_oracles-1), then distractors
    chunk_tokens = []
    examples_raw = []
    for e in range(spec.n_examples):
        bridges = take_special(n_bridge)
        hop_keys = []
        for hop in range(spec.hops):
            keys = take_special(spec.key_tokens_per_oracle)
            hop_keys.append(keys)
            tokens = filler(spec.chunk_len)
            used = write_run(tokens, key_run(keys, bridges))
            free = np.setdiff1d(np.arange(spec.chunk_len), used)
            marker_at = rng.choice(free, size=min(n_marker_positions, len(free)),
                                   replace=False)
            tokens[marker_at] = rng.integers(marker_lo, marker_hi, size=len(marker_at))
            chunk_tokens.append(tokens)
        question = np.concatenate(hop_keys)
        answer_at = int(rng.integers(0, spec.chunk_len - ANSWER_LEN + 1))
        answer = chunk_tokens[-1][answer_at:answer_at + ANSWER_LEN].copy()
        oracle_ids = tuple(range(e * spec.hops, (e + 1) * spec.hops))
        examples_raw.append((e, question, answer, oracle_ids))

    for _ in range(n_distractors):
        chunk_tokens.append(filler(spec.chunk_len))

    # pollution: single-key copies into random distractors (full rate for the
    # final hop, half rate earlier), plus decoy distractors that receive the
    # final hop's complete doubled key run
    full_rate = int(round(spec.distractor_overlap * n_distractors))
    early_rate = full_rate // 2
    n_decoys = full_rate // 2
    for e, question, _, _ in examples_raw:
        for hop in range(spec.hops):
            rate = full_rate if hop == spec.hops - 1 else early_rate
            keys = question[hop * spec.key_tokens_per_oracle:
                            (hop + 1) * spec.key_tokens_per_oracle]
            for key in keys:
                if rate == 0:
                    continue
                for t in rng.choice(n_distractors, size=rate, replace=False):
                    pos = int(rng.integers(spec.chunk_len))
                    chunk_tokens[n_oracles + t][pos] = key
        if n_decoys and spec.hops >= 1:
            last_keys = question[(spec.hops - 1) * spec.key_tokens_per_oracle:]
            decoy_run = np.repeat(last_keys, KEY_COPIES)
            for t in rng.choice(n_distractors, size=n_decoys, replace=False):
                write_run(chunk_tokens[n_oracles + t], decoy_run)

    chunks = [Chunk(chunk_id=i, tokens=toks) for i, toks in enumerate(chunk_tokens)]
    examples = [QAExample(id=e, question=q, answer=a, oracle_chunk_ids=o)
                for e, q, a, o in examples_raw]
    n_train = int(round(spec.train_fraction * len(examples)))
    meta = {
        "seed": spec.seed,
        "n_chunks": spec.n_chunks,
        "chunk_len": spec.chunk_len,
        "vocab_size": spec.vocab_size,
        "hops": spec.hops,
        "n_oracle_chunks": n_oracles,
        "n_distractors": n_distractors,
        "key_tokens_per_oracle": spec.key_tokens_per_oracle,
        "distractor_overlap": spec.distractor_overlap,
        "pollution_per_key": {"final_hop": full_rate, "earlier_hops": early_rate},
        "decoys_per_example": n_decoys,
        "n_train": n_train,
        "n_eval": len(examples) - n_train,
    }
    return SyntheticTask(chunks=chunks, train_examples=examples[:n_train],
                         eval_examples=examples[n_train:], meta=meta)
