"""Training the retrieval state against a frozen model.

Only the probe embeddings and the layer-head weights are trainable; the
model itself is never touched (tests pin this with a weight checksum). The
loss is a soft cross-entropy that spreads the target mass evenly over the
oracle chunks of each example.

Gradients are reverse-mode and hand-written: the scoring head routes each
probe row's gradient to its best-matching pooled row (ties to the lowest
index), and the decoder backward walks the taped forward pass through
feed-forward, cross-attention, self-attention, rotary, and norm blocks down
to the probe embeddings. A central-finite-difference checker validates both
parameter groups.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .data import QAExample
from .errors import ConfigError, DataError, InternalError
from .fileio import atomic_write_text
from .model import (ModelWeights, decoder_forward, embed_tokens, gelu_grad,
                    key_proj_blocks, rope_angles)
from .pool import ChunkPool, PooledIndex
from .retrieval import (RetrievalParams, ScoreVector, Selection, aggregate_scores,
                        initial_selection)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 3e-3
    warmup_steps: int = 20
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    n_initial: int = 8           # initial-context size recomputed per example

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class GradReport:
    d_retrieval_tokens: np.ndarray    # (R, d)
    d_layer_head_weights: np.ndarray  # (L_dec, n_heads)
    loss: float


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def retrieval_loss(scores: ScoreVector | np.ndarray, oracle_indices) -> float:
    """-mean over oracle chunks of log softmax(scores), evaluated stably."""
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    oracle = np.asarray(sorted(set(int(i) for i in oracle_indices)), dtype=np.int64)
    if oracle.size == 0:
        raise DataError("empty oracle set")
    if oracle.min() < 0 or oracle.max() >= len(values):
        raise DataError("oracle index outside the pool")
    m = np.max(values)
    lse = m + np.log(np.sum(np.exp(values - m)))
    return float(lse - np.mean(values[oracle]))


def _loss_grad_wrt_scores(values: np.ndarray, oracle: np.ndarray) -> np.ndarray:
    m = np.max(values)
    e = np.exp(values - m)
    ds = e / e.sum()
    ds[oracle] -= 1.0 / oracle.size
    return ds


# ---------------------------------------------------------------------------
# backward building blocks
# ---------------------------------------------------------------------------

def _rmsnorm_backward(dy: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return r * dy - x * (r ** 3) * dot / d


def _softmax_backward(attn: np.ndarray, dattn: np.ndarray) -> np.ndarray:
    return attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))


def _rope_backward(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Transpose of the pair rotation: rotate gradients by the negated angles."""
    c = cos[:, None, :]
    s = sin[:, None, :]
    de = dy[..., 0::2]
    do = dy[..., 1::2]
    out = np.empty_like(dy)
    out[..., 0::2] = de * c + do * s
    out[..., 1::2] = -de * s + do * c
    return out


def _decoder_backward(weights: ModelWeights, tape: list, d_exposed: np.ndarray,
                      probe_positions: np.ndarray) -> np.ndarray:
    """Backpropagate gradients of the exposed lifted queries to the decoder
    input embeddings. Model weights and context rows are constants."""
    config = weights.config
    dh, H, d = config.head_dim, config.n_heads, config.embed_dim
    eps = config.rmsnorm_eps
    scale = config.attn_scale
    T = tape[0]["sa_in"].shape[0]
    cos, sin = rope_angles(np.arange(T), dh, config.rope_base, np.float64)

    dx = np.zeros((T, d))
    for li in reversed(range(config.n_dec_layers)):
        layer = weights.dec_layers[li]
        lt = tape[li]

        # feed-forward block
        dpre = (dx @ layer["w2"].T) * gelu_grad(lt["ffn_pre"])
        dn3 = dpre @ layer["w1"].T
        dx = dx + _rmsnorm_backward(dn3 * layer["ffn_norm"], lt["ffn_in"], eps)

        # cross-attention block: exposure taps the lifted queries directly,
        # the attention output (if any context) adds a second path
        dq_lift = np.zeros((T, H, d))
        dq_lift[probe_positions] = d_exposed[li].transpose(1, 0, 2)   # (P, H, d)
        if lt["ca_attn"] is not None:
            attn, ctx, v = lt["ca_attn"], lt["ca_ctx"], lt["ca_v"]
            dz = (dx @ layer["ca_wo"].T).reshape(T, H, dh)
            dattn = np.einsum("thk,nhk->thn", dz, v, optimize=True)
            dlogits = _softmax_backward(attn, dattn)
            dq_lift += np.einsum("thn,nd->thd", dlogits, ctx, optimize=True) * scale
        blocks = key_proj_blocks(layer["ca_wk"], config)
        per_head = np.repeat(blocks, config.heads_per_group, axis=0)  # (H, d, dh)
        dq_rot = np.einsum("thd,hdk->thk", dq_lift, per_head, optimize=True)
        dq_rot *= layer["ca_key_scale"]
        dq = _rope_backward(dq_rot, cos, sin)
        dn2 = dq.reshape(T, H * dh) @ layer["ca_wq"].T
        dx = dx + _rmsnorm_backward(dn2 * layer["ca_norm"], lt["ca_in"], eps)

        # self-attention block
        q, k, v, attn = lt["sa_q"], lt["sa_k"], lt["sa_v"], lt["sa_attn"]
        dz = (dx @ layer["sa_wo"].T).reshape(T, H, dh)
        dattn = np.einsum("thk,shk->ths", dz, v, optimize=True)
        dlogits = _softmax_backward(attn, dattn)
        dqr = np.einsum("ths,shk->thk", dlogits, k, optimize=True) * scale
        dkr = np.einsum("ths,thk->shk", dlogits, q, optimize=True) * scale
        dv = np.einsum("ths,thk->shk", attn, dz, optimize=True)
        dq = _rope_backward(dqr, cos, sin)
        dk = _rope_backward(dkr, cos, sin)
        dn = (dq.reshape(T, H * dh) @ layer["sa_wq"].T
              + dk.reshape(T, H * dh) @ layer["sa_wk"].T
              + dv.reshape(T, H * dh) @ layer["sa_wv"].T)
        dx = dx + _rmsnorm_backward(dn * layer["sa_norm"], lt["sa_in"], eps)
    return dx


def _scoring_backward(ds: np.ndarray, alpha: np.ndarray, scale: float,
                      chunk_rows, argmax: np.ndarray, shape) -> np.ndarray:
    """Gradient of the aggregated score w.r.t. the exposed queries: each probe
    row receives its argmax pooled row, weighted by ds_i * alpha[l, h] * scale."""
    L, H, R, d = shape
    d_exposed = np.zeros((L, H, R, d))
    M = len(chunk_rows)
    if isinstance(chunk_rows, np.ndarray) and chunk_rows.ndim == 3:
        stacked = np.asarray(chunk_rows, dtype=np.float64)
        rows_ax = np.arange(M)[:, None]
        for l in range(L):
            for h in range(H):
                gathered = stacked[rows_ax, argmax[:, l, h, :]]       # (M, R, d)
                d_exposed[l, h] = (alpha[l, h] * scale) * np.einsum(
                    "i,ird->rd", ds, gathered, optimize=True)
    else:
        for i in range(M):
            rows = np.asarray(chunk_rows[i], dtype=np.float64)
            gathered = rows[argmax[i]]                                # (L, H, R, d)
            d_exposed += (ds[i] * scale) * alpha[:, :, None, None] * gathered
    return d_exposed


# ---------------------------------------------------------------------------
# per-example gradient
# ---------------------------------------------------------------------------

def _require_float64(weights: ModelWeights) -> None:
    if weights.config.dtype != "float64":
        raise ConfigError("training and gradient checks require a float64 model")


def _oracle_pool_indices(example: QAExample, pool: ChunkPool) -> np.ndarray:
    return np.asarray(sorted(pool.index_of(c) for c in example.oracle_chunk_ids),
                      dtype=np.int64)


def _example_forward(weights: ModelWeights, example: QAExample, params: RetrievalParams,
                     context_rows: np.ndarray, stacked_rows, *, record_tape: bool):
    """Shared forward: decoder pass over [question; probes], then corpus scoring."""
    emb_q = embed_tokens(weights, example.question)
    emb = np.concatenate([emb_q, params.retrieval_tokens], axis=0)
    probe_positions = np.arange(example.question.size,
                                example.question.size + params.n_tokens)
    res = decoder_forward(weights, emb, context_rows, expose_positions=probe_positions,
                          want_logits=False, record_tape=record_tape)
    values, parts, argmax = aggregate_scores(
        res.exposed, stacked_rows, params.layer_head_weights,
        weights.config.attn_scale, want_parts=True)
    return res, probe_positions, values, parts, argmax


def _stack_pooled(pooled_index: PooledIndex):
    lens = {len(r) for r in pooled_index.rows}
    if len(lens) == 1:
        return np.stack([np.asarray(r, dtype=np.float64) for r in pooled_index.rows])
    return pooled_index.rows


def grad_retrieval_params(weights: ModelWeights, example: QAExample,
                          params: RetrievalParams, pool: ChunkPool,
                          pooled_index: PooledIndex, *, n_initial: int = 8,
                          initial: Selection | None = None,
                          stacked_rows=None) -> GradReport:
    """Loss and reverse-mode gradients for one example.

    The initial selection is recomputed from the question unless provided; it
    depends only on frozen state, so no gradient flows through it.
    """
    _require_float64(weights)
    oracle = _oracle_pool_indices(example, pool)
    if initial is None:
        _, initial = initial_selection(weights, example.question, pooled_index, n_initial)
    if stacked_rows is None:
        stacked_rows = _stack_pooled(pooled_index)
    context = pool.context_rows(list(initial))

    res, probe_positions, values, parts, argmax = _example_forward(
        weights, example, params, context, stacked_rows, record_tape=True)
    loss = retrieval_loss(values, oracle)
    ds = _loss_grad_wrt_scores(values, oracle)

    d_alpha = np.einsum("i,lhi->lh", ds, parts, optimize=True)
    d_exposed = _scoring_backward(ds, params.layer_head_weights,
                                  weights.config.attn_scale, stacked_rows,
                                  argmax, res.exposed.shape)
    d_emb = _decoder_backward(weights, res.tape, d_exposed, probe_positions)
    d_rho = d_emb[probe_positions]

    if not (np.all(np.isfinite(d_rho)) and np.all(np.isfinite(d_alpha))):
        raise InternalError("non-finite gradient in retrieval backward pass")
    return GradReport(d_retrieval_tokens=d_rho, d_layer_head_weights=d_alpha, loss=loss)


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_alpha: float
    max_rel_rho: float
    n_alpha: int
    n_rho: int
    details: dict = field(default_factory=dict)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def finite_diff_check(weights: ModelWeights, example: QAExample, params: RetrievalParams,
                      pool: ChunkPool, pooled_index: PooledIndex, *, n_initial: int = 8,
                      eps_alpha: float = 1e-4, eps_rho: float = 1e-5,
                      n_rho_samples: int = 32, seed: int = 0) -> FiniteDiffReport:
    """Central differences per coordinate against the reverse-mode gradients.

    Layer-head weights enter the loss only through the score aggregation, so
    their probes reuse the unperturbed per-(layer, head) maxsim terms exactly.
    Probe-embedding probes rerun the full forward with the maxsim routing
    frozen to the unperturbed argmax: the loss is piecewise-smooth in the
    probe embeddings and routing can flip inside the +/-eps window, so both
    probes must be evaluated on the branch the backward pass differentiates.
    The routing convention itself (best row, ties to the lowest index) is
    pinned by direct unit tests instead.
    """
    _require_float64(weights)
    oracle = _oracle_pool_indices(example, pool)
    _, initial = initial_selection(weights, example.question, pooled_index, n_initial)
    stacked = _stack_pooled(pooled_index)
    context = pool.context_rows(list(initial))
    report = grad_retrieval_params(weights, example, params, pool, pooled_index,
                                   n_initial=n_initial, initial=initial,
                                   stacked_rows=stacked)
    _, _, _, parts0, argmax0 = _example_forward(weights, example, params, context,
                                                stacked, record_tape=False)

    alpha_errs = np.zeros_like(params.layer_head_weights)
    L, H = params.layer_head_weights.shape
    for l in range(L):
        for h in range(H):
            losses = []
            for sign in (+1.0, -1.0):
                a = params.layer_head_weights.copy()
                a[l, h] += sign * eps_alpha
                losses.append(retrieval_loss(np.einsum("lh,lhm->m", a, parts0), oracle))
            fd = (losses[0] - losses[1]) / (2 * eps_alpha)
            alpha_errs[l, h] = _rel_err(fd, report.d_layer_head_weights[l, h])

    rng = np.random.default_rng(seed)
    R, d = params.retrieval_tokens.shape
    flat_coords = rng.choice(R * d, size=min(n_rho_samples, R * d), replace=False)
    rho_errs = []
    for coord in flat_coords:
        r, c = divmod(int(coord), d)
        losses = []
        for sign in (+1.0, -1.0):
            p = params.copy()
            p.retrieval_tokens[r, c] += sign * eps_rho
            exposed = exposed_for_probe(weights, example, p, context)
            values = aggregate_scores(exposed, stacked, p.layer_head_weights,
                                      weights.config.attn_scale,
                                      argmax_override=argmax0, tie_tol=np.inf)
            losses.append(retrieval_loss(values, oracle))
        fd = (losses[0] - losses[1]) / (2 * eps_rho)
        rho_errs.append(_rel_err(fd, report.d_retrieval_tokens[r, c]))

    return FiniteDiffReport(
        max_rel_alpha=float(alpha_errs.max()),
        max_rel_rho=float(max(rho_errs)),
        n_alpha=L * H,
        n_rho=len(rho_errs),
        details={"loss": report.loss},
    )


def exposed_for_probe(weights: ModelWeights, example: QAExample,
                      params: RetrievalParams, context_rows) -> np.ndarray:
    emb = np.concatenate([embed_tokens(weights, example.question),
                          params.retrieval_tokens], axis=0)
    probe_positions = np.arange(example.question.size,
                                example.question.size + params.n_tokens)
    res = decoder_forward(weights, emb, context_rows, expose_positions=probe_positions,
                          want_logits=False)
    return res.exposed


# ---------------------------------------------------------------------------
# the optimizer loop
# ---------------------------------------------------------------------------

def train(dataset: list[QAExample], params: RetrievalParams, pool: ChunkPool,
          pooled_index: PooledIndex, weights: ModelWeights,
          config: TrainConfig) -> tuple[RetrievalParams, list[dict]]:
    """Adam with decoupled weight decay and linear warmup, then constant lr.

    Deterministic for a fixed seed: epoch shuffles, batch order, and the
    gradient reduction are all fixed. Returns the trained params and the
    per-step loss history. The model is read-only throughout.
    """
    _require_float64(weights)
    if not dataset:
        raise DataError("empty training dataset")
    for ex in dataset:
        for cid in ex.oracle_chunk_ids:
            pool.index_of(cid)

    params = params.copy()
    stacked = _stack_pooled(pooled_index)
    initial_cache = {
        ex.id: initial_selection(weights, ex.question, pooled_index, config.n_initial)[1]
        for ex in dataset
    }

    rng = np.random.default_rng(config.seed)
    m_rho = np.zeros_like(params.retrieval_tokens)
    v_rho = np.zeros_like(params.retrieval_tokens)
    m_alpha = np.zeros_like(params.layer_head_weights)
    v_alpha = np.zeros_like(params.layer_head_weights)
    history = []

    order: list[int] = []
    for step in range(1, config.steps + 1):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        batch = [dataset[i] for i in order[:config.batch_size]]
        order = order[config.batch_size:]

        g_rho = np.zeros_like(params.retrieval_tokens)
        g_alpha = np.zeros_like(params.layer_head_weights)
        batch_loss = 0.0
        for ex in batch:
            rep = grad_retrieval_params(weights, ex, params, pool, pooled_index,
                                        n_initial=config.n_initial,
                                        initial=initial_cache[ex.id],
                                        stacked_rows=stacked)
            g_rho += rep.d_retrieval_tokens
            g_alpha += rep.d_layer_head_weights
            batch_loss += rep.loss
        g_rho /= len(batch)
        g_alpha /= len(batch)
        batch_loss /= len(batch)
        if not np.isfinite(batch_loss):
            raise InternalError(f"training diverged (non-finite loss) at step {step}")

        lr = config.lr * min(1.0, step / max(1, config.warmup_steps))
        bc1 = 1.0 - config.beta1 ** step
        bc2 = 1.0 - config.beta2 ** step
        for p, g, m, v in ((params.retrieval_tokens, g_rho, m_rho, v_rho),
                           (params.layer_head_weights, g_alpha, m_alpha, v_alpha)):
            m += (1.0 - config.beta1) * (g - m)
            v += (1.0 - config.beta2) * (np.square(g) - v)
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
                       + config.weight_decay * p)
        history.append({"step": step, "loss": batch_loss, "lr": lr})
    return params, history


def write_history(path, history: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss", "lr"])
    for row in history:
        writer.writerow([row["step"], f"{row['loss']:.10g}", f"{row['lr']:.10g}"])
    atomic_write_text(path, buf.getvalue())
