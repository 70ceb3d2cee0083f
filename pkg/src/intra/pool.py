"""The pre-encoded chunk pool.

Each corpus chunk is encoded once and stored twice:

* full-resolution rows — per-token RMS-normalized encoder states, consumed
  directly as cross-attention context during generation;
* pooled rows — a short mean-pooled summary of the same states, cheap enough
  to score against every chunk in the corpus.

Pools are write-once and immutable; persistence is a little-endian binary
file (magic ``INTRAPL1``) holding both row sets at float32 or 8-bit
precision. Raw tokens are not part of the pool file; they live in the chunk
JSONL produced by corpus generation and can be re-attached after loading.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from pathlib import Path

from .config import ModelConfig
from .errors import BadMagicError, BadVersionError, DataError, TruncatedFileError
from .fileio import atomic_write_bytes
from .model import ModelWeights, encode, rms_norm

POOL_MAGIC = b"INTRAPL1"
POOL_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_INT8 = 1


@dataclass
class Chunk:
    chunk_id: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size == 0:
            raise DataError(f"chunk {self.chunk_id} is empty")


@dataclass
class ChunkPool:
    """Normalized encoder states for an ordered set of chunks."""

    d: int
    chunk_ids: np.ndarray                 # (M,) int64
    rows: list                            # per chunk: (L_i, d) float32, RMS-normalized
    tokens: list | None = None            # per chunk raw tokens, if available
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.chunk_ids = np.asarray(self.chunk_ids, dtype=np.int64)
        self._index = {int(cid): i for i, cid in enumerate(self.chunk_ids)}
        if len(self._index) != len(self.chunk_ids):
            raise DataError("duplicate chunk_id in pool")

    @property
    def M(self) -> int:
        return len(self.chunk_ids)

    @property
    def N(self) -> int:
        return int(sum(len(r) for r in self.rows))

    @property
    def token_lens(self) -> np.ndarray:
        return np.array([len(r) for r in self.rows], dtype=np.int64)

    def index_of(self, chunk_id: int) -> int:
        try:
            return self._index[int(chunk_id)]
        except KeyError:
            raise DataError(f"chunk id {chunk_id} not in pool") from None

    def context_rows(self, indices) -> np.ndarray:
        """Concatenated full-resolution rows for the given pool indices, in order."""
        if len(indices) == 0:
            return np.zeros((0, self.d), dtype=np.float32)
        return np.concatenate([self.rows[i] for i in indices], axis=0)

    def tokens_for(self, indices) -> list[np.ndarray]:
        if self.tokens is None:
            raise DataError("pool has no attached tokens; load the chunk file and attach it")
        return [self.tokens[i] for i in indices]


@dataclass
class PooledIndex:
    """Short mean-pooled scoring rows, one block per chunk, same order as the pool."""

    pooled_len: int
    rows: list                            # per chunk: (min(pooled_len, L_i), d) float32

    @property
    def M(self) -> int:
        return len(self.rows)

    def mean_vectors(self) -> np.ndarray:
        """Per-chunk mean of the pooled rows, shape (M, d). Used by the coarse index."""
        return np.stack([r.mean(axis=0) for r in self.rows])


def mean_pool(rows: np.ndarray, pooled_len: int) -> np.ndarray:
    """Average contiguous segments of `rows` down to at most `pooled_len` rows.

    Segments partition the rows, sizes as equal as possible with earlier
    segments taking the extra row; if pooled_len >= len(rows) the input is
    returned unchanged (copied).
    """
    rows = np.asarray(rows)
    if pooled_len < 1:
        raise DataError("pooled_len must be >= 1")
    L = len(rows)
    if pooled_len >= L:
        return rows.copy()
    base, rem = divmod(L, pooled_len)
    out = np.empty((pooled_len, rows.shape[1]), dtype=rows.dtype)
    off = 0
    for j in range(pooled_len):
        size = base + 1 if j < rem else base
        out[j] = rows[off:off + size].mean(axis=0)
        off += size
    return out


def build_pool(chunks: list[Chunk], weights: ModelWeights) -> ChunkPool:
    """Encode every chunk and store its normalized states (float32)."""
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate chunk_id")
    eps = weights.config.rmsnorm_eps
    rows = []
    for c in chunks:
        states = encode(weights, c.tokens)
        rows.append(rms_norm(states, eps).astype(np.float32))
    return ChunkPool(d=weights.config.embed_dim, chunk_ids=np.array(ids),
                     rows=rows, tokens=[c.tokens for c in chunks])


def build_pooled_index(pool: ChunkPool, pooled_len: int) -> PooledIndex:
    return PooledIndex(pooled_len=pooled_len,
                       rows=[mean_pool(r, pooled_len) for r in pool.rows])


# ---------------------------------------------------------------------------
# 8-bit row quantization
# ---------------------------------------------------------------------------

def quantize_row(row: np.ndarray) -> tuple[np.float32, np.ndarray]:
    """Symmetric per-row int8: scale = max|row| / 127 (1.0 for an all-zero row)."""
    row = np.asarray(row, dtype=np.float32)
    max_abs = float(np.max(np.abs(row))) if row.size else 0.0
    scale = np.float32(max_abs / 127.0) if max_abs > 0 else np.float32(1.0)
    q = np.clip(np.round(row / scale), -127, 127).astype(np.int8)
    return scale, q


def dequantize_row(scale: np.float32, q: np.ndarray) -> np.ndarray:
    return np.float32(scale) * q.astype(np.float32)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _pack_rows(rows: np.ndarray, precision: str) -> bytes:
    if precision == "f32":
        return np.ascontiguousarray(rows, dtype="<f4").tobytes()
    parts = []
    for row in rows:
        scale, q = quantize_row(row)
        parts.append(struct.pack("<f", float(scale)) + q.tobytes())
    return b"".join(parts)


def _unpack_rows(buf: bytes, n_rows: int, d: int, precision: str) -> np.ndarray:
    if precision == "f32":
        return np.frombuffer(buf, dtype="<f4").reshape(n_rows, d).copy()
    out = np.empty((n_rows, d), dtype=np.float32)
    stride = 4 + d
    for i in range(n_rows):
        off = i * stride
        (scale,) = struct.unpack_from("<f", buf, off)
        q = np.frombuffer(buf, dtype=np.int8, count=d, offset=off + 4)
        out[i] = dequantize_row(np.float32(scale), q)
    return out


def save_pool(pool: ChunkPool, pooled_index: PooledIndex, path, precision: str = "f32") -> None:
    """Write pool + pooled index to one binary file at f32 or int8 precision."""
    if precision not in ("f32", "int8"):
        raise DataError(f"unknown precision {precision!r}")
    if pooled_index.M != pool.M:
        raise DataError("pool and pooled index disagree on chunk count")
    dtype_flag = _DTYPE_F32 if precision == "f32" else _DTYPE_INT8

    header = POOL_MAGIC + struct.pack("<IBIIQQ", POOL_VERSION, dtype_flag,
                                      pool.d, pooled_index.pooled_len,
                                      pool.M, pool.N)
    dir_entry = struct.Struct("<QIQQ")                 # chunk_id, token_len, full_off, pooled_off
    dir_size = dir_entry.size * pool.M
    payload = bytearray()
    entries = []
    base = len(header) + dir_size
    for i in range(pool.M):
        full = _pack_rows(pool.rows[i], precision)
        pooled = _pack_rows(pooled_index.rows[i], precision)
        entries.append(dir_entry.pack(int(pool.chunk_ids[i]), len(pool.rows[i]),
                                      base + len(payload),
                                      base + len(payload) + len(full)))
        payload += full + pooled
    atomic_write_bytes(path, header + b"".join(entries) + bytes(payload))


def load_pool(path, tokens_by_id: dict | None = None) -> tuple[ChunkPool, PooledIndex]:
    """Read a pool file back; int8 payloads are dequantized to float32 rows.

    `tokens_by_id` (chunk_id -> token array) re-attaches raw tokens, which the
    pool file itself does not carry.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != POOL_MAGIC:
        raise BadMagicError(f"bad magic in pool file {path}")
    try:
        version, dtype_flag, d, pooled_len, M, N = struct.unpack_from("<IBIIQQ", blob, 8)
    except struct.error:
        raise TruncatedFileError(f"truncated pool header in {path}") from None
    if version != POOL_VERSION:
        raise BadVersionError(f"unsupported pool version {version} in {path}")
    if dtype_flag not in (_DTYPE_F32, _DTYPE_INT8):
        raise DataError(f"unknown pool dtype flag {dtype_flag} in {path}")
    precision = "f32" if dtype_flag == _DTYPE_F32 else "int8"
    off = 8 + struct.calcsize("<IBIIQQ")
    dir_entry = struct.Struct("<QIQQ")
    if off + dir_entry.size * M > len(blob):
        raise TruncatedFileError(f"truncated chunk directory in {path}")

    ids, rows, pooled_rows = [], [], []
    row_bytes = 4 * d if precision == "f32" else 4 + d
    for i in range(M):
        cid, token_len, full_off, pooled_off = dir_entry.unpack_from(blob, off + i * dir_entry.size)
        plen = min(pooled_len, token_len)
        full_end = full_off + token_len * row_bytes
        pooled_end = pooled_off + plen * row_bytes
        if full_end > len(blob) or pooled_end > len(blob):
            raise TruncatedFileError(f"truncated pool payload in {path}")
        ids.append(cid)
        rows.append(_unpack_rows(blob[full_off:full_end], token_len, d, precision))
        pooled_rows.append(_unpack_rows(blob[pooled_off:pooled_end], plen, d, precision))
    if sum(len(r) for r in rows) != N:
        raise TruncatedFileError(f"pool row count disagrees with header in {path}")

    tokens = None
    if tokens_by_id is not None:
        tokens = [np.asarray(tokens_by_id[int(cid)], dtype=np.int64) for cid in ids]
    pool = ChunkPool(d=d, chunk_ids=np.array(ids), rows=rows, tokens=tokens)
    return pool, PooledIndex(pooled_len=pooled_len, rows=pooled_rows)


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

def storage_bytes(n_tokens: int, d: int, bytes_per_element: int) -> int:
    """Bytes needed to store one d-dimensional row per corpus token."""
    return int(n_tokens) * int(d) * int(bytes_per_element)


def kv_compression_ratio(n_layers: int, n_kv_heads: int, head_dim: int, d: int) -> float:
    """Per-token cache scalars of a layerwise projected key/value cache
    (2 * layers * kv_heads * head_dim) over the single shared d-vector."""
    return 2.0 * n_layers * n_kv_heads * head_dim / d


def pool_stats(pool: ChunkPool, config: ModelConfig) -> dict:
    return {
        "chunks": pool.M,
        "tokens": pool.N,
        "d": pool.d,
        "bytes_f32": storage_bytes(pool.N, pool.d, 4),
        "bytes_int8": storage_bytes(pool.N, pool.d, 1),
        "kv_compression_ratio": kv_compression_ratio(
            config.n_dec_layers, config.n_kv_heads, config.head_dim, config.embed_dim),
    }
