"""Chunk scoring and selection.

Two scoring stages share one late-interaction primitive (`maxsim`):

* the initial selection scores the encoded question against every chunk's
  pooled rows and keeps the best few as cross-attention context;
* the full scoring pass appends trainable probe embeddings to the question,
  runs the decoder over that context, harvests the lifted cross-attention
  queries at the probe positions from every layer, and scores the whole
  corpus with a learned per-(layer, head) weighting.

Selection is always deterministic: descending score, ties broken toward the
lower chunk index. An optional coarse inverted-file index prunes candidates
before exact scoring.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import BadMagicError, BadVersionError, DataError, TruncatedFileError
from .fileio import atomic_write_bytes
from .model import ModelWeights, decoder_forward, embed_tokens, encode, rms_norm
from .pool import ChunkPool, PooledIndex

PARAMS_MAGIC = b"INTRARP1"


# ---------------------------------------------------------------------------
# trainable retrieval state
# ---------------------------------------------------------------------------

@dataclass
class RetrievalParams:
    """The only trainable state: probe embeddings and layer-head weights."""

    retrieval_tokens: np.ndarray      # (R, d) float64
    layer_head_weights: np.ndarray    # (n_dec_layers, n_heads) float64

    def __post_init__(self):
        self.retrieval_tokens = np.asarray(self.retrieval_tokens, dtype=np.float64)
        self.layer_head_weights = np.asarray(self.layer_head_weights, dtype=np.float64)
        if self.retrieval_tokens.ndim != 2 or self.retrieval_tokens.shape[0] < 1:
            raise DataError("retrieval_tokens must be a non-empty (R, d) matrix")
        if not (np.all(np.isfinite(self.retrieval_tokens))
                and np.all(np.isfinite(self.layer_head_weights))):
            raise DataError("retrieval params must be finite")

    @property
    def n_tokens(self) -> int:
        return self.retrieval_tokens.shape[0]

    def copy(self) -> "RetrievalParams":
        return RetrievalParams(self.retrieval_tokens.copy(), self.layer_head_weights.copy())

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.retrieval_tokens).tobytes())
        h.update(np.ascontiguousarray(self.layer_head_weights).tobytes())
        return h.hexdigest()[:16]


def init_params(config: ModelConfig, n_retrieval_tokens: int, seed: int = 0) -> RetrievalParams:
    """Seeded init: normal(0, 0.02) probe embeddings, uniform layer-head weights."""
    if n_retrieval_tokens < 1:
        raise DataError("need at least one retrieval token")
    rng = np.random.default_rng(seed)
    rho = rng.standard_normal((n_retrieval_tokens, config.embed_dim)) * 0.02
    n_cells = config.n_dec_layers * config.n_heads
    alpha = np.full((config.n_dec_layers, config.n_heads), 1.0 / n_cells)
    return RetrievalParams(rho, alpha)


def save_params(params: RetrievalParams, path) -> None:
    R, d = params.retrieval_tokens.shape
    L, H = params.layer_head_weights.shape
    out = PARAMS_MAGIC + struct.pack("<4I", R, d, L, H)
    out += np.ascontiguousarray(params.retrieval_tokens, dtype="<f8").tobytes()
    out += np.ascontiguousarray(params.layer_head_weights, dtype="<f8").tobytes()
    atomic_write_bytes(path, out)


def load_params(path) -> RetrievalParams:
    blob = Path(path).read_bytes()
    if blob[:8] != PARAMS_MAGIC:
        raise BadMagicError(f"bad magic in params file {path}")
    R, d, L, H = struct.unpack_from("<4I", blob, 8)
    need = 8 + 16 + 8 * (R * d + L * H)
    if len(blob) < need:
        raise TruncatedFileError(f"truncated params file {path}")
    off = 24
    rho = np.frombuffer(blob, dtype="<f8", count=R * d, offset=off).reshape(R, d).copy()
    off += 8 * R * d
    alpha = np.frombuffer(blob, dtype="<f8", count=L * H, offset=off).reshape(L, H).copy()
    return RetrievalParams(rho, alpha)


# ---------------------------------------------------------------------------
# scores and selections
# ---------------------------------------------------------------------------

@dataclass
class ScoreVector:
    """One score per chunk, in pool order. Restricted scoring (see `candidates`
    arguments) marks unscored chunks with -inf; full scoring is always finite."""

    values: np.ndarray
    stage: str                       # "initial" | "intra"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class Selection:
    """Ordered chunk indices, descending score."""

    indices: tuple

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, i):
        return self.indices[i]

    def as_list(self) -> list[int]:
        return list(self.indices)


def select_top_n(scores: ScoreVector | np.ndarray, n: int) -> Selection:
    """Top-n by score, ties toward the lower index; -inf entries are never selected."""
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    if n < 0:
        raise DataError("n must be >= 0")
    eligible = np.flatnonzero(values > -np.inf)
    order = eligible[np.lexsort((eligible, -values[eligible]))]
    return Selection(tuple(int(i) for i in order[:n]))


def rerank(initial: Selection, scores: ScoreVector | np.ndarray) -> Selection:
    """Reorder the members of `initial` by score, stable on ties (comparison mode)."""
    if len(initial) == 0:
        raise DataError("cannot rerank an empty selection")
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores)
    member_scores = np.array([values[i] for i in initial])
    order = np.argsort(-member_scores, kind="stable")
    return Selection(tuple(initial[int(j)] for j in order))


# ---------------------------------------------------------------------------
# late-interaction scoring
# ---------------------------------------------------------------------------

def maxsim(u: np.ndarray, v: np.ndarray, scale: float) -> float:
    """Sum over rows of u of the best scaled dot product against any row of v."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 2 or v.ndim != 2 or len(u) == 0 or len(v) == 0:
        raise DataError("maxsim needs non-empty row matrices")
    sims = (u @ v.T) * scale
    return float(np.sum(np.max(sims, axis=1)))


def score_rows_against_chunks(query_rows: np.ndarray, chunk_rows: list,
                              scale: float, workers: int = 1,
                              candidates=None) -> np.ndarray:
    """maxsim(query_rows, chunk) for every chunk; -inf where not a candidate.

    Chunks are scored independently, so the work may be split across threads
    over disjoint ranges; results are identical either way.
    """
    M = len(chunk_rows)
    out = np.full(M, -np.inf)
    idx = np.arange(M) if candidates is None else np.asarray(sorted(candidates), dtype=np.int64)

    def score_slab(slab):
        for i in slab:
            sims = (query_rows @ chunk_rows[i].T) * scale
            out[i] = np.sum(np.max(sims, axis=1))

    if workers > 1 and len(idx) > 1:
        slabs = np.array_split(idx, workers)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(score_slab, slabs))
    else:
        score_slab(idx)
    return out


def initial_selection(weights: ModelWeights, question_tokens, pooled_index: PooledIndex,
                      n_initial: int, *, metric: str = "maxsim", score_rows: list | None = None,
                      workers: int = 1, candidates=None) -> tuple[ScoreVector, Selection]:
    """Similarity of the encoded question to every chunk; keep the best n_initial.

    n_initial = 0 still returns the full score vector with an empty selection
    (the no-initial-context mode). `score_rows` overrides the pooled rows with
    any per-chunk row blocks, e.g. the full-resolution pool rows.
    """
    question = np.asarray(question_tokens, dtype=np.int64)
    if question.size == 0:
        raise DataError("empty question")
    config = weights.config
    q_states = rms_norm(encode(weights, question), config.rmsnorm_eps)
    rows = pooled_index.rows if score_rows is None else score_rows
    if metric == "maxsim":
        values = score_rows_against_chunks(q_states, rows, config.attn_scale,
                                           workers=workers, candidates=candidates)
    elif metric == "cosine":
        q_mean = q_states.mean(axis=0)
        q_norm = np.linalg.norm(q_mean)
        values = np.full(len(rows), -np.inf)
        idx = range(len(rows)) if candidates is None else sorted(candidates)
        for i in idx:
            c_mean = np.asarray(rows[i]).mean(axis=0)
            denom = q_norm * np.linalg.norm(c_mean)
            values[i] = float(q_mean @ c_mean / denom) if denom > 0 else 0.0
    else:
        raise DataError(f"unknown initial-selection metric {metric!r}")
    return ScoreVector(values, "initial"), select_top_n(values, n_initial)


def exposed_probe_queries(weights: ModelWeights, question_tokens,
                          params: RetrievalParams, context_rows) -> np.ndarray:
    """Run the decoder over [question; probes] and collect the lifted queries
    at the probe positions from every layer. Shape (L_dec, n_heads, R, d)."""
    question = np.asarray(question_tokens, dtype=np.int64)
    if question.size == 0:
        raise DataError("empty question")
    if params.retrieval_tokens.shape[1] != weights.config.embed_dim:
        raise DataError("retrieval token width does not match the model")
    emb_q = embed_tokens(weights, question)
    emb = np.concatenate([emb_q, params.retrieval_tokens.astype(emb_q.dtype)], axis=0)
    probe_positions = np.arange(question.size, question.size + params.n_tokens)
    res = decoder_forward(weights, emb, context_rows,
                          expose_positions=probe_positions, want_logits=False)
    return res.exposed


def aggregate_scores(exposed: np.ndarray, chunk_rows: list, layer_head_weights: np.ndarray,
                     scale: float, *, workers: int = 1, candidates=None,
                     want_parts: bool = False, argmax_override=None, tie_tol: float = 0.0):
    """Weighted late-interaction score of exposed probe queries against chunks.

    score_i = sum over (layer, head) of weight[l, h] * maxsim(exposed[l, h], rows_i).

    With `want_parts`, also returns the per-(layer, head, chunk) maxsim values
    and the per-probe-row argmax used (gradient routing and its tie rule live
    on top of these). `argmax_override` re-uses previously recorded argmax
    indices wherever the current best beats them by at most `tie_tol`.
    """
    L, H, R, d = exposed.shape
    M = len(chunk_rows)
    flat_q = exposed.reshape(L * H * R, d)
    values = np.full(M, -np.inf)
    parts = np.zeros((L, H, M)) if want_parts else None
    argmax = np.zeros((M, L, H, R), dtype=np.int32) if want_parts else None
    idx = np.arange(M) if candidates is None else np.asarray(sorted(candidates), dtype=np.int64)

    # Equal-length pooled rows stacked as (M, L_p, d) take one matmul for the
    # whole corpus; ragged row lists fall back to a per-chunk loop.
    if isinstance(chunk_rows, np.ndarray) and chunk_rows.ndim == 3 and candidates is None:
        Lp = chunk_rows.shape[1]
        stacked = np.asarray(chunk_rows, dtype=flat_q.dtype)
        sims = (flat_q @ stacked.reshape(M * Lp, d).T).reshape(L * H * R, M, Lp) * scale
        best = np.argmax(sims, axis=2)                              # (LHR, M)
        rows_ax = np.arange(L * H * R)[:, None]
        vals = sims[rows_ax, np.arange(M)[None, :], best]
        if argmax_override is not None:
            prev = argmax_override.reshape(M, L * H * R).T          # (LHR, M)
            prev_vals = sims[rows_ax, np.arange(M)[None, :], prev]
            keep_prev = (vals - prev_vals) <= tie_tol
            best = np.where(keep_prev, prev, best)
            vals = np.where(keep_prev, prev_vals, vals)
        per_lh = vals.reshape(L, H, R, M).sum(axis=2)               # (L, H, M)
        values = np.einsum("lh,lhm->m", layer_head_weights, per_lh)
        if want_parts:
            return values, per_lh, best.T.reshape(M, L, H, R).astype(np.int32)
        return values

    def score_slab(slab):
        for i in slab:
            sims = (flat_q @ np.asarray(chunk_rows[i], dtype=flat_q.dtype).T) * scale
            best = np.argmax(sims, axis=1)
            vals = sims[np.arange(sims.shape[0]), best]
            if argmax_override is not None:
                prev = argmax_override[i].reshape(-1)
                prev_vals = sims[np.arange(sims.shape[0]), prev]
                keep_prev = (vals - prev_vals) <= tie_tol
                best = np.where(keep_prev, prev, best)
                vals = np.where(keep_prev, prev_vals, vals)
            per_lh = vals.reshape(L, H, R).sum(axis=2)
            values[i] = float(np.sum(layer_head_weights * per_lh))
            if want_parts:
                parts[:, :, i] = per_lh
                argmax[i] = best.reshape(L, H, R)

    if workers > 1 and len(idx) > 1 and not want_parts:
        slabs = np.array_split(idx, workers)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(score_slab, slabs))
    else:
        score_slab(idx)

    if want_parts:
        return values, parts, argmax
    return values


def intra_scores(weights: ModelWeights, question_tokens, params: RetrievalParams,
                 initial: Selection, pool: ChunkPool, pooled_index: PooledIndex, *,
                 score_rows: list | None = None, workers: int = 1,
                 candidates=None) -> ScoreVector:
    """Score the whole corpus with decoder probe queries.

    The decoder runs once over [question; probes] with the initial selection's
    full-resolution rows as cross-attention context (concatenated in selection
    order); every chunk is then scored against the exposed queries.
    """
    context = pool.context_rows(list(initial))
    exposed = exposed_probe_queries(weights, question_tokens, params, context)
    rows = pooled_index.rows if score_rows is None else score_rows
    values = aggregate_scores(exposed, rows, params.layer_head_weights,
                              weights.config.attn_scale, workers=workers,
                              candidates=candidates)
    return ScoreVector(values, "intra")


# ---------------------------------------------------------------------------
# coarse inverted-file pruning
# ---------------------------------------------------------------------------

@dataclass
class IvfIndex:
    centroids: np.ndarray             # (C, d)
    members: list                     # per centroid: sorted np.ndarray of chunk indices

    @property
    def n_centroids(self) -> int:
        return len(self.members)


def ivf_build(pooled_index: PooledIndex, n_centroids: int, seed: int = 0,
              n_iters: int = 20) -> IvfIndex:
    """k-means (k-means++ init, fixed Lloyd iterations) over per-chunk mean vectors."""
    M = pooled_index.M
    if not 1 <= n_centroids <= M:
        raise DataError(f"n_centroids must be in [1, {M}]")
    points = pooled_index.mean_vectors().astype(np.float64)
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_centroids, points.shape[1]))
    centroids[0] = points[rng.integers(M)]
    closest = np.full(M, np.inf)
    for c in range(1, n_centroids):
        d2 = np.sum(np.square(points - centroids[c - 1]), axis=1)
        closest = np.minimum(closest, d2)
        total = closest.sum()
        if total <= 0:
            centroids[c] = points[rng.integers(M)]
            continue
        centroids[c] = points[rng.choice(M, p=closest / total)]

    for _ in range(n_iters):
        d2 = np.sum(np.square(points[:, None, :] - centroids[None, :, :]), axis=2)
        assign = np.argmin(d2, axis=1)
        for c in range(n_centroids):
            mask = assign == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                # re-seed dead centroids on the point farthest from its centroid
                far = int(np.argmax(d2[np.arange(M), assign]))
                centroids[c] = points[far]
                assign[far] = c

    members = [np.flatnonzero(assign == c) for c in range(n_centroids)]
    return IvfIndex(centroids=centroids, members=members)


def ivf_search(index: IvfIndex, query_rows: np.ndarray, nprobe: int) -> np.ndarray:
    """Union of the chunks behind the `nprobe` centroids nearest (by dot product
    with the summed query rows) to the query. Sorted chunk indices."""
    if not 1 <= nprobe <= index.n_centroids:
        raise DataError(f"nprobe must be in [1, {index.n_centroids}]")
    q = np.asarray(query_rows, dtype=np.float64)
    if q.ndim != 2 or len(q) == 0:
        raise DataError("query_rows must be a non-empty row matrix")
    scores = index.centroids @ q.sum(axis=0)
    order = np.lexsort((np.arange(index.n_centroids), -scores))
    probed = order[:nprobe]
    if len(probed) == 0:
        return np.array([], dtype=np.int64)
    return np.unique(np.concatenate([index.members[c] for c in probed]))


# ---------------------------------------------------------------------------
# ranking output
# ---------------------------------------------------------------------------

def ranking_record(query_id, stage: str, selection: Selection,
                   scores: ScoreVector | np.ndarray, chunk_ids: np.ndarray,
                   params_hash: str = "-") -> dict:
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores)
    return {
        "query_id": query_id,
        "stage": stage,
        "top": [{"chunk_id": int(chunk_ids[i]), "score": float(values[i])} for i in selection],
        "params_hash": params_hash,
    }


def write_rankings(path, records: list[dict]) -> None:
    atomic_write_bytes(path, ("".join(json.dumps(r) + "\n" for r in records)).encode())
