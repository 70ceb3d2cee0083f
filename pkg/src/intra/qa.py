"""End-to-end question answering and its evaluation metrics.

`answer` chains the full pipeline: score the corpus with the encoded
question, rescore it with decoder probe queries over that initial context,
assemble a five-chunk context, and greedy-decode an answer from the stored
chunk states. `evaluate` runs any mix of retrieval modes (pipeline stages,
degenerate contexts, lexical baselines) under identical generation and
reports complete-evidence recall, exact match, token F1, and the gap-closure
summary.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .baselines import (build_lexical_index, bm25_rank, encoder_maxsim_rank,
                        rrf_fuse, tfidf_rank)
from .config import GenerationConfig
from .data import QAExample
from .errors import DataError
from .fileio import atomic_write_text
from .model import ModelWeights, greedy_decode
from .pool import ChunkPool, PooledIndex
from .retrieval import (RetrievalParams, Selection, initial_selection, intra_scores,
                        rerank, select_top_n)

RECALL_KS = (5, 10, 20)
PIPELINE_MODES = ("initial", "rerank", "intra")
CONTEXT_MODES = ("random", "complete")
BASELINE_MODES = ("tfidf", "bm25", "rrf", "maxsim")
ALL_MODES = PIPELINE_MODES + CONTEXT_MODES + BASELINE_MODES


# ---------------------------------------------------------------------------
# context assembly and generation
# ---------------------------------------------------------------------------

def assemble_context(final_ranking, initial_ranking, mode: str = "four_plus_one") -> list[int]:
    """Build the generation context (at most five chunks).

    four_plus_one: the first four of the final ranking, then the best initial
    chunk not already present (walking down the initial ranking on
    duplicates; the fifth slot is dropped if the initial ranking runs out).
    top5: simply the first five of the final ranking.
    """
    final_ranking = list(final_ranking)
    if mode == "top5":
        return final_ranking[:5]
    if mode != "four_plus_one":
        raise DataError(f"unknown context mode {mode!r}")
    context = final_ranking[:4]
    for c in initial_ranking:
        if c not in context:
            context.append(c)
            break
    return context


def answer(weights: ModelWeights, question_tokens, params: RetrievalParams,
           pool: ChunkPool, pooled_index: PooledIndex,
           gen_config: GenerationConfig = GenerationConfig(),
           return_trace: bool = False):
    """Retrieve, assemble context, and greedy-decode an answer. Deterministic."""
    score_rows = pool.rows if gen_config.score_with_full_rows else None
    _, initial = initial_selection(weights, question_tokens, pooled_index,
                                   gen_config.n_initial, metric=gen_config.initial_metric,
                                   score_rows=score_rows)
    scores = intra_scores(weights, question_tokens, params, initial, pool, pooled_index,
                          score_rows=score_rows)
    final = select_top_n(scores, gen_config.n_final)
    context = assemble_context(final, initial, gen_config.context_mode)
    tokens = greedy_decode(weights, question_tokens, pool.context_rows(context),
                           gen_config.max_answer_len)
    if return_trace:
        return tokens, {"initial": initial, "final": final, "context": context,
                        "scores": scores}
    return tokens


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def complete_evidence_recall(retrieved, oracle, k: int) -> float:
    """1.0 iff every oracle chunk appears among the first k retrieved."""
    if k < 1:
        raise DataError("k must be >= 1")
    oracle = set(oracle)
    if not oracle:
        raise DataError("empty oracle set")
    return 1.0 if oracle.issubset(set(list(retrieved)[:k])) else 0.0


def exact_match(pred, gold) -> float:
    gold = list(gold)
    if not gold:
        raise DataError("empty gold answer")
    return 1.0 if list(pred) == gold else 0.0


def token_f1(pred, gold) -> float:
    """Harmonic mean of token-multiset precision and recall over raw token ids."""
    from collections import Counter
    gold = list(gold)
    if not gold:
        raise DataError("empty gold answer")
    pred = list(pred)
    if not pred:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2.0 * precision * recall / (precision + recall)


def gap_closure(em_intra: float, em_random: float, em_complete: float) -> float:
    """Share (percent) of the random-to-complete EM gap recovered; may leave [0, 100]."""
    if em_complete == em_random:
        raise DataError("gap closure undefined: complete and random EM coincide")
    return 100.0 * (em_intra - em_random) / (em_complete - em_random)


def ci_half_width(p: float, n: int) -> float:
    """Normal-approximation 95% half-width for a rate."""
    if n <= 0:
        return 0.0
    return 1.96 * float(np.sqrt(max(p * (1.0 - p), 0.0) / n))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    modes: dict                      # mode -> {recall@k, em, f1, ci's, n}
    n_examples: int
    seed: int
    gap_closure: float | None = None
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "n_examples": self.n_examples,
            "seed": self.seed,
            "gap_closure": self.gap_closure,
            "notes": self.notes,
            "modes": self.modes,
        }, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        cols = ["mode"]
        for k in RECALL_KS:
            cols += [f"recall@{k}", f"recall@{k}_ci"]
        cols += ["em", "em_ci", "f1", "f1_ci", "n"]
        writer.writerow(cols)
        for mode, row in self.modes.items():
            out = [mode]
            for k in RECALL_KS:
                out += [f"{row[f'recall@{k}']:.4f}", f"{row[f'recall@{k}_ci']:.4f}"]
            out += [f"{row['em']:.4f}", f"{row['em_ci']:.4f}",
                    f"{row['f1']:.4f}", f"{row['f1_ci']:.4f}", row["n"]]
            writer.writerow(out)
        return buf.getvalue()


def _rankings_for_example(mode: str, ex: QAExample, shared: dict, pool: ChunkPool,
                          gen_config: GenerationConfig, seed: int):
    """(retrieved pool indices, generation-context pool indices) for one mode."""
    rank_depth = max(RECALL_KS)
    oracle_idx = sorted(pool.index_of(c) for c in ex.oracle_chunk_ids)

    if mode == "initial":
        ranking = select_top_n(shared["initial_scores"], rank_depth)
        context = assemble_context(ranking, ranking, gen_config.context_mode)
    elif mode == "rerank":
        ranking = rerank(shared["initial_sel"], shared["intra_scores"])
        context = assemble_context(ranking, shared["initial_sel"], gen_config.context_mode)
    elif mode == "intra":
        ranking = select_top_n(shared["intra_scores"], rank_depth)
        context = assemble_context(ranking, shared["initial_sel"], gen_config.context_mode)
    elif mode == "random":
        rng = np.random.default_rng([seed, ex.id])
        non_oracle = np.setdiff1d(np.arange(pool.M), np.array(oracle_idx, dtype=np.int64))
        size = min(5, len(non_oracle))
        ranking = Selection(tuple(int(i) for i in rng.choice(non_oracle, size=size,
                                                             replace=False)))
        context = list(ranking)
    elif mode == "complete":
        order = sorted(oracle_idx, key=lambda i: int(pool.chunk_ids[i]))
        ranking = Selection(tuple(order))
        context = list(ranking)
    elif mode == "tfidf":
        ranking = tfidf_rank(ex.question, shared["lexical_index"], rank_depth)
        context = list(ranking)[:5]
    elif mode == "bm25":
        ranking = bm25_rank(ex.question, shared["lexical_index"], rank_depth)
        context = list(ranking)[:5]
    elif mode == "rrf":
        parts = [tfidf_rank(ex.question, shared["lexical_index"], rank_depth),
                 bm25_rank(ex.question, shared["lexical_index"], rank_depth),
                 shared["maxsim_rank"]]
        ranking = rrf_fuse(parts, rank_depth)
        context = list(ranking)[:5]
    elif mode == "maxsim":
        ranking = shared["maxsim_rank"]
        context = list(ranking)[:5]
    else:
        raise DataError(f"unknown evaluation mode {mode!r}")
    return list(ranking), context


def evaluate(weights: ModelWeights, dataset: list[QAExample], params: RetrievalParams,
             pool: ChunkPool, pooled_index: PooledIndex, modes=PIPELINE_MODES,
             gen_config: GenerationConfig = GenerationConfig(), seed: int = 0,
             generate: bool = True) -> EvalReport:
    """Evaluate every requested mode under identical generation.

    Examples are processed in id order; the random-context mode draws its
    non-oracle sample from (seed, example id), so repeated runs agree.
    """
    if not dataset:
        raise DataError("empty evaluation dataset")
    modes = list(modes)
    for m in modes:
        if m not in ALL_MODES:
            raise DataError(f"unknown evaluation mode {m!r}")

    needs_lexical = any(m in ("tfidf", "bm25", "rrf") for m in modes)
    needs_maxsim = any(m in ("maxsim", "rrf") for m in modes)
    needs_pipeline = any(m in PIPELINE_MODES for m in modes)
    lexical_index = None
    if needs_lexical:
        if pool.tokens is None:
            raise DataError("lexical baselines need chunk tokens attached to the pool")
        lexical_index = build_lexical_index(pool.tokens)

    score_rows = pool.rows if gen_config.score_with_full_rows else None
    acc = {m: {"recall": {k: [] for k in RECALL_KS}, "em": [], "f1": []} for m in modes}
    notes = []

    for ex in sorted(dataset, key=lambda e: e.id):
        shared = {"lexical_index": lexical_index}
        if needs_pipeline:
            init_scores, init_sel = initial_selection(
                weights, ex.question, pooled_index, gen_config.n_initial,
                metric=gen_config.initial_metric, score_rows=score_rows)
            shared["initial_scores"] = init_scores
            shared["initial_sel"] = init_sel
            if any(m in ("rerank", "intra") for m in modes):
                shared["intra_scores"] = intra_scores(
                    weights, ex.question, params, init_sel, pool, pooled_index,
                    score_rows=score_rows)
        if needs_maxsim:
            shared["maxsim_rank"] = encoder_maxsim_rank(
                weights, ex.question, pooled_index, max(RECALL_KS))

        oracle_idx = [pool.index_of(c) for c in ex.oracle_chunk_ids]
        for mode in modes:
            retrieved, context = _rankings_for_example(mode, ex, shared, pool,
                                                       gen_config, seed)
            for k in RECALL_KS:
                acc[mode]["recall"][k].append(
                    complete_evidence_recall(retrieved, oracle_idx, k))
            if generate:
                pred = greedy_decode(weights, ex.question, pool.context_rows(context),
                                     gen_config.max_answer_len)
                acc[mode]["em"].append(exact_match(pred, ex.answer))
                acc[mode]["f1"].append(token_f1(pred, ex.answer))

    n = len(dataset)
    mode_rows = {}
    for mode in modes:
        row = {"n": n}
        for k in RECALL_KS:
            p = float(np.mean(acc[mode]["recall"][k]))
            row[f"recall@{k}"] = p
            row[f"recall@{k}_ci"] = ci_half_width(p, n)
        em = float(np.mean(acc[mode]["em"])) if acc[mode]["em"] else 0.0
        f1 = float(np.mean(acc[mode]["f1"])) if acc[mode]["f1"] else 0.0
        row["em"] = em
        row["em_ci"] = ci_half_width(em, n)
        row["f1"] = f1
        row["f1_ci"] = ci_half_width(f1, n)
        mode_rows[mode] = row

    gc = None
    if generate and all(m in modes for m in ("intra", "random", "complete")):
        try:
            gc = gap_closure(mode_rows["intra"]["em"], mode_rows["random"]["em"],
                             mode_rows["complete"]["em"])
        except DataError as err:
            notes.append(str(err))
    return EvalReport(modes=mode_rows, n_examples=n, seed=seed, gap_closure=gc,
                      notes=notes)


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    atomic_write_text(json_path, report.to_json() + "\n")
    if csv_path is not None:
        atomic_write_text(csv_path, report.to_csv())
