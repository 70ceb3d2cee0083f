"""Prefill-cost accounting: the analytic model and wall-clock measurements.

Three strategies answer the same question over the same retrieved chunk set
and differ only in how the cross-attention context comes to exist:

* full  — re-encode the whole corpus at query time, then prefill;
* rag   — re-encode the retrieved chunks' raw tokens at query time (packed
          into one quadratic-cost pass), then prefill;
* intra — slice the stored chunk rows out of the pool, then prefill.

Time-to-first-token excludes retrieval (the chunk set is fixed up front) and
stops when the first greedy token exists. All strategies feed the decoder
the same context states up to float rounding, so their outputs agree; only
the context-construction cost differs.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .errors import ConfigError, DataError
from .fileio import atomic_write_text
from .model import (ModelWeights, decoder_forward, embed_tokens, encode_packed,
                    greedy_decode, rms_norm)
from .pool import ChunkPool

MODES = ("full", "rag", "intra")
SWEEP_CSV_HEADER = "mode,axis,value,ttft_ms_min,ttft_ms_median,ttft_ms_max,tps_median,reps"


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostParams:
    M: int          # corpus chunks
    L_c: int        # tokens per chunk
    L_q: int        # query tokens
    k: int          # retrieved chunks
    L_g: int        # generated tokens

    def __post_init__(self):
        for name in ("M", "L_c", "L_q", "L_g"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.k < 0:
            raise DataError("k must be >= 0")

    @property
    def N(self) -> int:
        return self.M * self.L_c


def cost_model(params: CostParams, mode: str) -> dict:
    """Abstract unit counts per phase for one query."""
    p = params
    ctx = p.L_q + p.k * p.L_c
    if mode == "full":
        full_ctx = p.L_q + p.M * p.L_c
        return {"pre_query": 1, "retrieval": 1,
                "prefill": full_ctx ** 2,
                "generation": p.L_g * (full_ctx + p.L_g)}
    if mode == "rag":
        return {"pre_query": p.M * p.L_c ** 2,
                "retrieval": int(np.sqrt(p.M) * p.L_q * p.L_c),
                "prefill": ctx ** 2,
                "generation": p.L_g * (ctx + p.L_g)}
    if mode == "intra":
        return {"pre_query": p.M * p.L_c ** 2,
                "retrieval": int(np.sqrt(p.M) * p.L_q * p.L_c),
                "prefill": p.L_q * ctx,
                "generation": p.L_g * (ctx + p.L_g)}
    raise DataError(f"unknown cost-model mode {mode!r}")


# ---------------------------------------------------------------------------
# measured benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchSetup:
    """Fixed inputs shared by every measured mode.

    `chunk_order` decides which stored chunks play the part of the retrieved
    set: mode comparisons at a given k all use chunk_order[:k], so every mode
    sees the identical evidence. Retrieval itself is outside the clock.
    """

    weights: ModelWeights
    pool: ChunkPool
    question: np.ndarray
    chunk_order: np.ndarray
    gen_len: int = 8
    full_context_max_chunks: int = 64
    seed: int = 0

    def __post_init__(self):
        self.question = np.asarray(self.question, dtype=np.int64)
        self.chunk_order = np.asarray(self.chunk_order, dtype=np.int64)
        if self.pool.tokens is None:
            raise DataError("benchmark pool needs attached tokens (rag mode re-encodes them)")


@dataclass
class BenchResult:
    mode: str
    k: int
    chunk_len: int
    ttft_ms_min: float
    ttft_ms_median: float
    ttft_ms_max: float
    tps_min: float = 0.0
    tps_median: float = 0.0
    tps_max: float = 0.0
    reps: int = 0


def _context_indices(setup: BenchSetup, mode: str, k: int) -> list[int]:
    if mode == "full":
        return list(setup.chunk_order[:min(setup.pool.M, setup.full_context_max_chunks)])
    return list(setup.chunk_order[:k])


def _build_context(setup: BenchSetup, mode: str, indices: list[int]) -> np.ndarray:
    """The per-mode context construction — this is the step being benchmarked."""
    pool = setup.pool
    if mode == "intra":
        return pool.context_rows(indices)
    if mode in ("rag", "full"):
        if not indices:
            return np.zeros((0, pool.d), dtype=np.float32)
        states = encode_packed(setup.weights, pool.tokens_for(indices))
        eps = setup.weights.config.rmsnorm_eps
        return np.concatenate([rms_norm(s, eps) for s in states], axis=0).astype(np.float32)
    raise DataError(f"unknown benchmark mode {mode!r}")


def first_token(setup: BenchSetup, mode: str, k: int) -> int:
    """The token each mode would emit first; used by output-equivalence checks."""
    context = _build_context(setup, mode, _context_indices(setup, mode, k))
    emb = embed_tokens(setup.weights, setup.question)
    res = decoder_forward(setup.weights, emb, context, want_logits=True)
    return int(np.argmax(res.logits[-1]))


def measure_ttft(setup: BenchSetup, mode: str, k: int, reps: int = 10,
                 warmup: int = 3) -> BenchResult:
    """Wall-clock from context construction to the first generated token."""
    if mode not in MODES:
        raise DataError(f"unknown benchmark mode {mode!r}")
    if reps < 3:
        raise DataError("reps must be >= 3 (dispersion is undefined below that)")
    indices = _context_indices(setup, mode, k)
    emb = embed_tokens(setup.weights, setup.question)
    times = []
    for rep in range(warmup + reps):
        t0 = time.perf_counter()
        context = _build_context(setup, mode, indices)
        res = decoder_forward(setup.weights, emb, context, want_logits=True)
        tok = int(np.argmax(res.logits[-1]))
        t1 = time.perf_counter()
        assert tok >= 0
        if rep >= warmup:
            times.append(1e3 * (t1 - t0))
    chunk_len = int(setup.pool.token_lens.max()) if setup.pool.M else 0
    return BenchResult(mode=mode, k=k, chunk_len=chunk_len,
                       ttft_ms_min=min(times), ttft_ms_median=median(times),
                       ttft_ms_max=max(times), reps=reps)


def measure_throughput(setup: BenchSetup, mode: str, k: int, gen_len: int | None = None,
                       reps: int = 10, warmup: int = 3) -> BenchResult:
    """Greedy tokens per second after the first token (context built outside
    the clock; the decode loop is identical across modes)."""
    if mode not in MODES:
        raise DataError(f"unknown benchmark mode {mode!r}")
    if reps < 3:
        raise DataError("reps must be >= 3 (dispersion is undefined below that)")
    gen_len = setup.gen_len if gen_len is None else gen_len
    if gen_len < 1:
        raise DataError("gen_len must be >= 1")
    indices = _context_indices(setup, mode, k)
    context = _build_context(setup, mode, indices)
    weights = setup.weights
    question = list(setup.question)
    rates = []
    for rep in range(warmup + reps):
        generated: list[int] = []
        t_first = None
        for step in range(gen_len + 1):
            emb = weights.embed[np.asarray(question + generated, dtype=np.int64)]
            res = decoder_forward(weights, emb, context, want_logits=True)
            generated.append(int(np.argmax(res.logits[-1])))
            if step == 0:
                t_first = time.perf_counter()
        elapsed = time.perf_counter() - t_first
        if rep >= warmup:
            rates.append(gen_len / elapsed)
    chunk_len = int(setup.pool.token_lens.max()) if setup.pool.M else 0
    return BenchResult(mode=mode, k=k, chunk_len=chunk_len,
                       ttft_ms_min=0.0, ttft_ms_median=0.0, ttft_ms_max=0.0,
                       tps_min=min(rates), tps_median=median(rates),
                       tps_max=max(rates), reps=reps)


def decode_tokens(setup: BenchSetup, mode: str, k: int, gen_len: int) -> list[int]:
    """Full greedy output under one mode; modes given the same chunk set agree."""
    context = _build_context(setup, mode, _context_indices(setup, mode, k))
    return greedy_decode(setup.weights, setup.question, context, gen_len,
                         stop_at_eos=False)


# ---------------------------------------------------------------------------
# sweeps and fits
# ---------------------------------------------------------------------------

def sweep(setup: BenchSetup, axis: str, values, modes, out_path=None,
          reps: int = 10, warmup: int = 3, setup_for_value=None,
          default_k: int = 8, measure_tps: bool = True) -> list[BenchResult]:
    """One row per (mode, axis value); CSV written when out_path is given.

    axis "k" reuses the setup; axis "L_c" needs `setup_for_value(chunk_len)`
    to furnish a setup whose pool was built at that chunk length.
    """
    values = list(values)
    if not values or sorted(values) != values:
        raise DataError("sweep values must be non-empty and ascending")
    if axis not in ("k", "L_c"):
        raise DataError(f"unknown sweep axis {axis!r}")
    if axis == "L_c" and setup_for_value is None:
        raise ConfigError("an L_c sweep needs setup_for_value to rebuild the pool")

    results = []
    for mode in modes:
        for value in values:
            s = setup if axis == "k" else setup_for_value(value)
            k = value if axis == "k" else default_k
            res = measure_ttft(s, mode, k, reps=reps, warmup=warmup)
            if measure_tps:
                tps = measure_throughput(s, mode, k, reps=max(3, reps // 2),
                                         warmup=min(warmup, 1))
                res.tps_min, res.tps_median, res.tps_max = tps.tps_min, tps.tps_median, tps.tps_max
            res_axis_value = value
            results.append((res, res_axis_value))

    if out_path is not None:
        lines = [SWEEP_CSV_HEADER]
        for res, value in results:
            lines.append(f"{res.mode},{axis},{value},{res.ttft_ms_min:.6g},"
                         f"{res.ttft_ms_median:.6g},{res.ttft_ms_max:.6g},"
                         f"{res.tps_median:.6g},{res.reps}")
        atomic_write_text(out_path, "\n".join(lines) + "\n")
        sidecar = {
            "axis": axis, "values": values, "modes": list(modes),
            "reps": reps, "warmup": warmup, "seed": setup.seed,
            "question_len": int(setup.question.size),
            "pool_chunks": setup.pool.M,
            "host": {"platform": platform.platform(),
                     "python": platform.python_version(),
                     "numpy": np.__version__},
        }
        atomic_write_text(str(out_path) + ".meta.json", json.dumps(sidecar, indent=2) + "\n")
    return [r for r, _ in results]


def fit_r2(x, y, degree: int) -> float:
    """Variance explained by a least-squares polynomial of the given degree."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    coeffs = np.polyfit(x, y, degree)
    resid = y - np.polyval(coeffs, x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot
