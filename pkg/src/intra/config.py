"""Model configuration shared by every component."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and constants of the toy encoder-decoder.

    The defaults are the desk-scale configuration used throughout the test
    suite: small enough that every forward pass runs in microseconds, large
    enough that grouped-query attention (n_heads > n_kv_heads) is exercised.
    """

    embed_dim: int = 32          # width of the residual stream (d)
    head_dim: int = 8            # per-head dimension
    n_heads: int = 4             # query heads
    n_kv_heads: int = 2          # key/value heads (grouped-query attention)
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    vocab_size: int = 256
    max_positions: int = 65536
    rmsnorm_eps: float = 1e-6
    ffn_mult: int = 4            # feed-forward hidden width = ffn_mult * embed_dim
    rope_base: float = 10000.0
    eos_token_id: int = 1
    dtype: str = "float64"       # "float64" or "float32"

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        for name in ("embed_dim", "head_dim", "n_heads", "n_kv_heads",
                     "n_enc_layers", "n_dec_layers", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rmsnorm_eps <= 0:
            raise ValueError("rmsnorm_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def heads_per_group(self) -> int:
        """Query heads sharing one key/value head."""
        return self.n_heads // self.n_kv_heads

    @property
    def attn_scale(self) -> float:
        """Logit scale used by attention and by chunk scoring: 1/sqrt(head_dim)."""
        return 1.0 / float(np.sqrt(self.head_dim))

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def group_of_head(self, head: int) -> int:
        """Key/value group that query head `head` belongs to."""
        return head // self.heads_per_group


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for the retrieve-then-generate pipeline."""

    n_initial: int = 8           # size of the similarity-based initial selection
    n_final: int = 5             # size of the final decoder-scored selection
    n_retrieval_tokens: int = 8  # trainable probe embeddings appended to the question
    pooled_len: int = 3          # rows kept per chunk in the pooled scoring index
    max_answer_len: int = 16
    context_mode: str = "four_plus_one"  # or "top5": take the context straight from the final set
    initial_metric: str = "maxsim"       # or "cosine": mean-vector cosine for the initial selection
    score_with_full_rows: bool = False   # score chunks on full-resolution rows instead of pooled

    def __post_init__(self):
        for name in ("n_final", "n_retrieval_tokens", "pooled_len", "max_answer_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_initial < 0:
            raise ValueError("n_initial must be >= 0")
        if self.context_mode not in ("four_plus_one", "top5"):
            raise ValueError(f"unknown context_mode {self.context_mode!r}")
        if self.initial_metric not in ("maxsim", "cosine"):
            raise ValueError(f"unknown initial_metric {self.initial_metric!r}")
