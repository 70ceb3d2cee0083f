"""Toy encoder-decoder whose cross-attention runs against one shared pool.

The decoder never projects stored context rows through layer-specific key
weights. Instead each query head is *lifted* into the shared pool space
(`lift_queries`): the key norm scale and the head's key-projection block are
folded into the query, so attention logits are plain dot products against
context rows that were normalized once, at encoding time. The lifted queries
double as retrieval probes: `decoder_forward` can expose them at designated
input positions, and the retrieval engine scores every chunk in the corpus
with them.

Everything is plain numpy, deterministic, and pure: weights are never
mutated by a forward pass.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .config import ModelConfig
from .errors import ConfigError, DataError, InternalError
from .fileio import atomic_write_bytes

WEIGHTS_MAGIC = b"INTRAWT1"

# Row-block size for the packed encoder; keeps attention-matrix slabs small.
_ENC_ROW_BLOCK = 2048


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def rms_norm(x: np.ndarray, eps: float) -> np.ndarray:
    """Scale-free RMS normalization over the last axis: x / sqrt(mean(x^2) + eps)."""
    x = np.asarray(x)
    if eps <= 0:
        raise ConfigError("rms_norm eps must be positive")
    if not np.all(np.isfinite(x)):
        raise InternalError("non-finite activation")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps)


def rope_angles(positions, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables, shape (len(positions), head_dim // 2). Angles in float64."""
    half = head_dim // 2
    inv_freq = base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64).reshape(-1, 1) * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate interleaved (even, odd) coordinate pairs of the last axis."""
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_apply(q: np.ndarray, position, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding for the heads of one sequence position.

    `q` has shape (n_heads, head_dim) (or any (..., head_dim)); pair i of each
    head is rotated by angle position * base^(-2i/head_dim).
    """
    q = np.asarray(q)
    if q.shape[-1] % 2 != 0:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {q.shape[-1]}")
    cos, sin = rope_angles([position], q.shape[-1], base, q.dtype)
    return _rotate_pairs(q, cos[0], sin[0])


def _rope_seq(q: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotary embedding for a (T, n_heads, head_dim) tensor; cos/sin are (T, head_dim/2)."""
    return _rotate_pairs(q, cos[:, None, :], sin[:, None, :])


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


_SQRT2 = 1.4142135623730951
_SQRT_2PI = 2.5066282746310002


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * np.square(x)) / _SQRT_2PI
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

_ENC_KEYS = ("sa_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2")
_DEC_KEYS = ("sa_norm", "sa_wq", "sa_wk", "sa_wv", "sa_wo",
             "ca_norm", "ca_wq", "ca_wk", "ca_key_scale", "ca_wv", "ca_wo",
             "ffn_norm", "w1", "w2")


@dataclass
class ModelWeights:
    """All frozen parameters. Layer dicts use the fixed key sets above."""

    config: ModelConfig
    embed: np.ndarray                     # (vocab, d)
    enc_layers: list = field(default_factory=list)
    dec_layers: list = field(default_factory=list)
    out_norm: np.ndarray = None           # (d,)
    out_head: np.ndarray = None           # (d, vocab)

    def named_tensors(self):
        """Deterministic (name, array) iteration used by checkpoints and checksums."""
        yield "embed", self.embed
        for i, layer in enumerate(self.enc_layers):
            for k in _ENC_KEYS:
                yield f"enc.{i}.{k}", layer[k]
        for i, layer in enumerate(self.dec_layers):
            for k in _DEC_KEYS:
                yield f"dec.{i}.{k}", layer[k]
        yield "out_norm", self.out_norm
        yield "out_head", self.out_head

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded random weights with the statistical skeleton of a trained model.

    Three init choices stand in for what pretraining would otherwise supply;
    without them a random transformer cannot retrieve anything at all:

    * token embeddings are unit-scale, so token identity dominates the
      residual stream and encoder-similarity search is meaningful;
    * each output projection is the transpose of its value projection, so
      attention mixes content between positions in the shared basis instead
      of scrambling it through two independent random maps;
    * cross-attention query projections reuse the key-projection blocks, so
      a lifted query built from residual content stays positively aligned
      with stored rows carrying that same content. Queries and keys of
      self-attention share one matrix for the same reason (similarity-driven
      attention);
    * query/key projections are drawn at a scale that puts attention logits
      in the selective regime (order one after the 1/sqrt(head_dim) scale)
      rather than the uniform-averaging regime of tiny random weights.

    Feed-forward blocks and the output head are normal(0, 0.02) perturbations;
    norm scales are ones.
    """
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, dh = config.embed_dim, config.head_dim
    hq, hkv = config.n_heads, config.n_kv_heads
    qk_scale = 0.2
    v_scale = 0.1

    def proj(rows, cols, scale=0.02):
        return (rng.standard_normal((rows, cols)) * scale).astype(dt)

    w = ModelWeights(config=config,
                     embed=rng.standard_normal((config.vocab_size, d)).astype(dt))
    for _ in range(config.n_enc_layers):
        wqk = proj(d, hq * dh, scale=qk_scale)
        wv = proj(d, hq * dh, scale=v_scale)
        w.enc_layers.append({
            "sa_norm": np.ones(d, dtype=dt),
            "wq": wqk,
            "wk": wqk.copy(),
            "wv": wv,
            "wo": np.ascontiguousarray(wv.T),
            "ffn_norm": np.ones(d, dtype=dt),
            "w1": proj(d, config.ffn_mult * d),
            "w2": proj(config.ffn_mult * d, d),
        })
    for _ in range(config.n_dec_layers):
        sa_wqk = proj(d, hq * dh, scale=qk_scale)
        sa_wv = proj(d, hq * dh, scale=v_scale)
        ca_wk = proj(d, hkv * dh, scale=qk_scale)
        ca_wv = proj(d, hkv * dh, scale=v_scale)
        w.dec_layers.append({
            "sa_norm": np.ones(d, dtype=dt),
            "sa_wq": sa_wqk,
            "sa_wk": sa_wqk.copy(),
            "sa_wv": sa_wv,
            "sa_wo": np.ascontiguousarray(sa_wv.T),
            "ca_norm": np.ones(d, dtype=dt),
            "ca_wq": np.ascontiguousarray(np.repeat(ca_wk.reshape(d, hkv, dh),
                                                    config.heads_per_group, axis=1
                                                    ).reshape(d, hq * dh)),
            "ca_wk": ca_wk,
            "ca_key_scale": np.ones(dh, dtype=dt),
            "ca_wv": ca_wv,
            "ca_wo": np.ascontiguousarray(
                np.repeat(ca_wv.reshape(d, hkv, dh).transpose(1, 2, 0),
                          config.heads_per_group, axis=0).reshape(hq * dh, d)),
            "ffn_norm": np.ones(d, dtype=dt),
            "w1": proj(d, config.ffn_mult * d),
            "w2": proj(config.ffn_mult * d, d),
        })
    w.out_norm = np.ones(d, dtype=dt)
    w.out_head = proj(d, config.vocab_size)
    return w


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    """Binary checkpoint: magic, config header, then named f32 tensors."""
    c = weights.config
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack(
        "<11I", 1, c.embed_dim, c.head_dim, c.n_heads, c.n_kv_heads,
        c.n_enc_layers, c.n_dec_layers, c.vocab_size, c.max_positions,
        c.ffn_mult, c.eos_token_id,
    )
    out += struct.pack("<ddB", c.rmsnorm_eps, c.rope_base, 1 if c.dtype == "float64" else 0)
    tensors = list(weights.named_tensors())
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_weights(path: str | Path) -> ModelWeights:
    blob = Path(path).read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise DataError(f"bad magic in weight checkpoint {path}")
    off = 8
    (version, d, dh, nh, nkv, lenc, ldec, vocab, maxpos, ffn_mult,
     eos) = struct.unpack_from("<11I", blob, off)
    off += 44
    if version != 1:
        raise DataError(f"unsupported weight checkpoint version {version}")
    eps, rope_base, dt_flag = struct.unpack_from("<ddB", blob, off)
    off += 17
    config = ModelConfig(
        embed_dim=d, head_dim=dh, n_heads=nh, n_kv_heads=nkv,
        n_enc_layers=lenc, n_dec_layers=ldec, vocab_size=vocab,
        max_positions=maxpos, rmsnorm_eps=eps, ffn_mult=ffn_mult,
        rope_base=rope_base, eos_token_id=eos,
        dtype="float64" if dt_flag else "float32",
    )
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        if off + size > len(blob):
            raise DataError(f"truncated weight checkpoint {path}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=off)
        tensors[name] = arr.reshape(shape).astype(config.np_dtype)
        off += size
    w = ModelWeights(config=config, embed=tensors["embed"])
    for i in range(lenc):
        w.enc_layers.append({k: tensors[f"enc.{i}.{k}"] for k in _ENC_KEYS})
    for i in range(ldec):
        w.dec_layers.append({k: tensors[f"dec.{i}.{k}"] for k in _DEC_KEYS})
    w.out_norm = tensors["out_norm"]
    w.out_head = tensors["out_head"]
    return w


# ---------------------------------------------------------------------------
# query lifting (the reversed key projection)
# ---------------------------------------------------------------------------

def key_proj_blocks(ca_wk: np.ndarray, config: ModelConfig) -> np.ndarray:
    """View a (d, n_kv*head_dim) key projection as per-group blocks (n_kv, d, head_dim)."""
    d = ca_wk.shape[0]
    return np.ascontiguousarray(
        ca_wk.reshape(d, config.n_kv_heads, config.head_dim).transpose(1, 0, 2)
    )


def lift_query(q_head: np.ndarray, key_scale: np.ndarray, key_proj_block: np.ndarray) -> np.ndarray:
    """Lift one head-space query into the shared pool space: (q ⊙ scale) @ W_block^T.

    The dot product of the lifted query with a normalized context row equals
    the conventional logit of q against that row's projected-and-scaled key,
    so one stored pool serves every layer and head.
    """
    q_head = np.asarray(q_head)
    key_scale = np.asarray(key_scale)
    key_proj_block = np.asarray(key_proj_block)
    if q_head.shape[-1] != key_scale.shape[0] or key_proj_block.shape[1] != key_scale.shape[0]:
        raise DataError("lift_query: head_dim mismatch between query, scale, and projection block")
    return (q_head * key_scale) @ key_proj_block.T


def lift_queries(q: np.ndarray, key_scale: np.ndarray, blocks: np.ndarray,
                 config: ModelConfig) -> np.ndarray:
    """Vectorized lift: (T, n_heads, head_dim) -> (T, n_heads, d)."""
    per_head = np.repeat(blocks, config.heads_per_group, axis=0)  # (n_heads, d, head_dim)
    return np.einsum("thk,hdk->thd", q * key_scale, per_head, optimize=True)


def standard_keys(kbar: np.ndarray, key_scale: np.ndarray, ca_wk: np.ndarray,
                  config: ModelConfig) -> np.ndarray:
    """Reference key path: per-group keys (kbar @ W_block) ⊙ scale, shape (n_kv, L, head_dim).

    Only used to cross-check the lifted-query path; inference never builds
    per-layer keys.
    """
    blocks = key_proj_blocks(ca_wk, config)
    keys = np.einsum("ld,gdk->glk", np.asarray(kbar), blocks, optimize=True)
    return keys * key_scale


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _validate_tokens(tokens, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DataError("token sequence must be non-empty and one-dimensional")
    if tokens.size > config.max_positions:
        raise DataError(f"sequence length {tokens.size} exceeds max_positions {config.max_positions}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise DataError("token id out of range")
    return tokens


def _encoder_layer(x: np.ndarray, layer: dict, cos: np.ndarray, sin: np.ndarray,
                   seg_ids: np.ndarray | None, config: ModelConfig) -> np.ndarray:
    """One bidirectional pre-norm block. seg_ids != None restricts attention to
    same-segment pairs (used to pack many chunks into one quadratic-cost pass)."""
    T = x.shape[0]
    dh, H = config.head_dim, config.n_heads
    scale = config.attn_scale

    n = rms_norm(x, config.rmsnorm_eps) * layer["sa_norm"]
    q = _rope_seq((n @ layer["wq"]).reshape(T, H, dh), cos, sin)
    k = _rope_seq((n @ layer["wk"]).reshape(T, H, dh), cos, sin)
    v = (n @ layer["wv"]).reshape(T, H, dh)

    attn_out = np.empty((T, H, dh), dtype=x.dtype)
    neg = np.array(-np.inf, dtype=x.dtype)
    for start in range(0, T, _ENC_ROW_BLOCK):
        rows = slice(start, min(start + _ENC_ROW_BLOCK, T))
        mask = None
        if seg_ids is not None:
            mask = seg_ids[rows][:, None] != seg_ids[None, :]
        for h in range(H):
            logits = (q[rows, h, :] @ k[:, h, :].T) * scale
            if mask is not None:
                logits = np.where(mask, neg, logits)
            attn_out[rows, h, :] = softmax(logits) @ v[:, h, :]
    x = x + attn_out.reshape(T, H * dh) @ layer["wo"]

    n2 = rms_norm(x, config.rmsnorm_eps) * layer["ffn_norm"]
    return x + gelu(n2 @ layer["w1"]) @ layer["w2"]


def _encoder_states(weights: ModelWeights, tokens: np.ndarray, positions: np.ndarray,
                    seg_ids: np.ndarray | None) -> np.ndarray:
    config = weights.config
    x = weights.embed[tokens]
    cos, sin = rope_angles(positions, config.head_dim, config.rope_base, x.dtype)
    for layer in weights.enc_layers:
        x = _encoder_layer(x, layer, cos, sin, seg_ids, config)
    return x


def encode(weights: ModelWeights, tokens) -> np.ndarray:
    """Encode one token sequence to per-token states, shape (len(tokens), d)."""
    tokens = _validate_tokens(tokens, weights.config)
    positions = np.arange(tokens.size)
    return _encoder_states(weights, tokens, positions, None)


def encode_packed(weights: ModelWeights, token_seqs: list) -> list[np.ndarray]:
    """Encode many sequences as one packed pass and return per-sequence states.

    Packing concatenates the sequences, restarts positions per segment, and
    masks attention to same-segment pairs, so the outputs match per-sequence
    `encode` up to float rounding while the attention cost stays quadratic in
    the total packed length. This is the "re-encode retrieved text from
    scratch" workload in the latency benchmark.
    """
    if not token_seqs:
        return []
    parts, positions, seg_ids = [], [], []
    for i, seq in enumerate(token_seqs):
        seq = _validate_tokens(seq, weights.config)
        parts.append(seq)
        positions.append(np.arange(seq.size))
        seg_ids.append(np.full(seq.size, i, dtype=np.int64))
    tokens = np.concatenate(parts)
    if tokens.size > weights.config.max_positions:
        raise DataError("packed sequence exceeds max_positions")
    states = _encoder_states(weights, tokens, np.concatenate(positions),
                             np.concatenate(seg_ids))
    out, off = [], 0
    for seq in parts:
        out.append(states[off:off + seq.size])
        off += seq.size
    return out


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def cross_attention_lifted(hidden: np.ndarray, kbar_context: np.ndarray | None,
                           layer: dict, positions: np.ndarray, config: ModelConfig,
                           tape: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One cross-attention sub-block in the shared pool space.

    Takes the residual-stream input, returns (new residual stream, lifted
    queries of shape (T, n_heads, d)). Context rows must already be
    RMS-normalized (caller contract; not checked). With an empty context the
    sub-block is the identity on its input, but lifted queries are still
    computed so they can serve as retrieval probes.
    """
    T = hidden.shape[0]
    dh, H = config.head_dim, config.n_heads
    cos, sin = rope_angles(positions, dh, config.rope_base, hidden.dtype)

    n = rms_norm(hidden, config.rmsnorm_eps) * layer["ca_norm"]
    q = _rope_seq((n @ layer["ca_wq"]).reshape(T, H, dh), cos, sin)
    blocks = key_proj_blocks(layer["ca_wk"], config)
    q_lift = lift_queries(q, layer["ca_key_scale"], blocks, config)

    if kbar_context is None or len(kbar_context) == 0:
        if tape is not None:
            tape.update(ca_in=hidden, ca_n=n, ca_q_rot=q, ca_q_lift=q_lift, ca_attn=None)
        return hidden, q_lift

    ctx = np.asarray(kbar_context, dtype=hidden.dtype)
    logits = np.einsum("thd,nd->thn", q_lift, ctx, optimize=True) * config.attn_scale
    if not np.all(np.isfinite(logits)):
        raise InternalError("non-finite activation in cross-attention logits")
    attn = softmax(logits, axis=-1)
    v = (ctx @ layer["ca_wv"]).reshape(len(ctx), config.n_kv_heads, dh)
    v = np.repeat(v, config.heads_per_group, axis=1)              # GQA replication
    z = np.einsum("thn,nhk->thk", attn, v, optimize=True)
    out = hidden + z.reshape(T, H * dh) @ layer["ca_wo"]
    if tape is not None:
        tape.update(ca_in=hidden, ca_n=n, ca_q_rot=q, ca_q_lift=q_lift,
                    ca_attn=attn, ca_ctx=ctx, ca_v=v)
    return out, q_lift


def cross_attention_standard(hidden: np.ndarray, kbar_context: np.ndarray,
                             layer: dict, positions: np.ndarray,
                             config: ModelConfig) -> np.ndarray:
    """Reference cross-attention that projects context rows into per-layer keys.

    Exists only so tests can confirm the lifted-query path reproduces it.
    """
    T = hidden.shape[0]
    dh, H = config.head_dim, config.n_heads
    cos, sin = rope_angles(positions, dh, config.rope_base, hidden.dtype)

    n = rms_norm(hidden, config.rmsnorm_eps) * layer["ca_norm"]
    q = _rope_seq((n @ layer["ca_wq"]).reshape(T, H, dh), cos, sin)
    keys = standard_keys(kbar_context, layer["ca_key_scale"], layer["ca_wk"], config)
    keys = np.repeat(keys, config.heads_per_group, axis=0)        # (n_heads, N, dh)
    logits = np.einsum("thk,hnk->thn", q, keys, optimize=True) * config.attn_scale
    attn = softmax(logits, axis=-1)
    ctx = np.asarray(kbar_context, dtype=hidden.dtype)
    v = (ctx @ layer["ca_wv"]).reshape(len(ctx), config.n_kv_heads, dh)
    v = np.repeat(v, config.heads_per_group, axis=1)
    z = np.einsum("thn,nhk->thk", attn, v, optimize=True)
    return hidden + z.reshape(T, H * dh) @ layer["ca_wo"]


def _decoder_self_attention(x: np.ndarray, layer: dict, cos: np.ndarray, sin: np.ndarray,
                            config: ModelConfig, tape: dict | None) -> np.ndarray:
    T = x.shape[0]
    dh, H = config.head_dim, config.n_heads
    n = rms_norm(x, config.rmsnorm_eps) * layer["sa_norm"]
    q = _rope_seq((n @ layer["sa_wq"]).reshape(T, H, dh), cos, sin)
    k = _rope_seq((n @ layer["sa_wk"]).reshape(T, H, dh), cos, sin)
    v = (n @ layer["sa_wv"]).reshape(T, H, dh)
    logits = np.einsum("thk,shk->ths", q, k, optimize=True) * config.attn_scale
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    logits = np.where(causal[:, None, :], np.array(-np.inf, dtype=x.dtype), logits)
    attn = softmax(logits, axis=-1)
    z = np.einsum("ths,shk->thk", attn, v, optimize=True)
    out = x + z.reshape(T, H * dh) @ layer["sa_wo"]
    if tape is not None:
        tape.update(sa_in=x, sa_n=n, sa_q=q, sa_k=k, sa_v=v, sa_attn=attn)
    return out


def _ffn(x: np.ndarray, layer: dict, config: ModelConfig, tape: dict | None) -> np.ndarray:
    n = rms_norm(x, config.rmsnorm_eps) * layer["ffn_norm"]
    pre = n @ layer["w1"]
    act = gelu(pre)
    out = x + act @ layer["w2"]
    if tape is not None:
        tape.update(ffn_in=x, ffn_pre=pre, ffn_act=act)
    return out


@dataclass
class DecoderResult:
    hidden: np.ndarray                    # (T, d) final residual stream
    exposed: np.ndarray | None = None     # (n_dec_layers, n_heads, P, d) lifted queries
    logits: np.ndarray | None = None      # (T, vocab)
    tape: list | None = None              # per-layer intermediates (for the trainer)


def decoder_forward(weights: ModelWeights, input_embeddings: np.ndarray,
                    kbar_context: np.ndarray | None = None, *,
                    expose_positions=None, want_logits: bool = True,
                    record_tape: bool = False) -> DecoderResult:
    """Single decoder pass: causal self-attention over the input, cross-attention
    against the shared context pool, feed-forward; per layer.

    `expose_positions` selects input rows whose lifted cross-attention queries
    are collected from every layer during the same pass. Exposing queries has
    no effect on the computed hidden states or logits.
    """
    config = weights.config
    x = np.asarray(input_embeddings, dtype=config.np_dtype)
    if x.ndim != 2 or x.shape[1] != config.embed_dim:
        raise DataError(f"input embeddings must be (T, {config.embed_dim})")
    T = x.shape[0]
    if T > config.max_positions:
        raise DataError("input length exceeds max_positions")
    if expose_positions is not None:
        expose_positions = np.asarray(expose_positions, dtype=np.int64)
        if expose_positions.size and (expose_positions.min() < 0 or expose_positions.max() >= T):
            raise DataError("designated expose position out of range")

    positions = np.arange(T)
    cos, sin = rope_angles(positions, config.head_dim, config.rope_base, x.dtype)
    exposed = [] if expose_positions is not None else None
    tape = [] if record_tape else None

    for layer in weights.dec_layers:
        layer_tape = {} if record_tape else None
        x = _decoder_self_attention(x, layer, cos, sin, config, layer_tape)
        x, q_lift = cross_attention_lifted(x, kbar_context, layer, positions, config,
                                           tape=layer_tape)
        if exposed is not None:
            exposed.append(q_lift[expose_positions].transpose(1, 0, 2))  # (H, P, d)
        x = _ffn(x, layer, config, layer_tape)
        if record_tape:
            tape.append(layer_tape)

    result = DecoderResult(hidden=x, tape=tape)
    if exposed is not None:
        result.exposed = np.stack(exposed)                         # (L, H, P, d)
    if want_logits:
        final = rms_norm(x, config.rmsnorm_eps) * weights.out_norm
        result.logits = final @ weights.out_head
    return result


def embed_tokens(weights: ModelWeights, tokens) -> np.ndarray:
    tokens = _validate_tokens(tokens, weights.config)
    return weights.embed[tokens]


def greedy_decode(weights: ModelWeights, question_tokens, kbar_context,
                  max_len: int, stop_at_eos: bool = True) -> list[int]:
    """Deterministic greedy generation conditioned on the question and context.

    Appends the argmax token (ties broken toward the lowest id) after the
    running sequence until EOS or `max_len` tokens. Returns the generated
    tokens, EOS excluded. An empty context is allowed: cross-attention is
    then the identity and generation conditions on the question alone.
    """
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    config = weights.config
    tokens = list(_validate_tokens(question_tokens, config))
    generated: list[int] = []
    for _ in range(max_len):
        emb = weights.embed[np.asarray(tokens + generated, dtype=np.int64)]
        res = decoder_forward(weights, emb, kbar_context, want_logits=True)
        nxt = int(np.argmax(res.logits[-1]))    # np.argmax takes the lowest index on ties
        if stop_at_eos and nxt == config.eos_token_id:
            break
        generated.append(nxt)
    return generated
