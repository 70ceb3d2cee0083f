"""Retrieval from within one encoder-decoder: the model scores its own
pre-encoded chunk pool with decoder attention queries and generates straight
from the stored states it retrieved."""

from .config import GenerationConfig, ModelConfig
from .data import QAExample, read_chunks, read_dataset, write_chunks, write_dataset
from .model import (DecoderResult, ModelWeights, cross_attention_lifted,
                    cross_attention_standard, decoder_forward, embed_tokens, encode,
                    encode_packed, greedy_decode, init_weights, lift_queries, lift_query,
                    load_weights, rms_norm, rope_apply, save_weights, standard_keys)
from .pool import (Chunk, ChunkPool, PooledIndex, build_pool, build_pooled_index,
                   dequantize_row, kv_compression_ratio, load_pool, mean_pool,
                   pool_stats, quantize_row, save_pool, storage_bytes)
from .retrieval import (IvfIndex, RetrievalParams, ScoreVector, Selection,
                        aggregate_scores, init_params, initial_selection, intra_scores,
                        ivf_build, ivf_search, load_params, maxsim, ranking_record,
                        rerank, save_params, select_top_n, write_rankings)
from .trainer import (FiniteDiffReport, GradReport, TrainConfig, finite_diff_check,
                      grad_retrieval_params, retrieval_loss, train, write_history)
from .qa import (EvalReport, answer, assemble_context, complete_evidence_recall,
                 evaluate, exact_match, gap_closure, token_f1, write_report)
from .baselines import (LexicalIndex, bm25_rank, build_lexical_index,
                        encoder_maxsim_rank, rrf_fuse, tfidf_rank)
from .bench import (BenchResult, BenchSetup, CostParams, cost_model, decode_tokens,
                    first_token, fit_r2, measure_throughput, measure_ttft, sweep)
from .synth import SyntheticTask, SyntheticTaskSpec, generate_task
from .errors import (BadMagicError, BadVersionError, ConfigError, DataError,
                     IntraError, InternalError, TruncatedFileError)

__version__ = "0.1.0"
