"""Command-line entry point.

Each subcommand is a thin adapter over one library operation. A JSON config
file supplies defaults ({"model": {...}, "retrieval": {...}, "train": {...},
"synth": {...}, "bench": {...}}); command-line flags win over config values.
All randomness descends from the recorded seeds; outputs are written
atomically; logs go to stderr, data only to declared paths.

Exit codes: 2 bad/missing configuration, 3 bad data, 4 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import qa as qa_mod
from .config import GenerationConfig, ModelConfig
from .data import read_chunks, read_dataset, write_chunks, write_dataset
from .errors import ConfigError, DataError, IntraError
from .fileio import atomic_write_text
from .model import init_weights, load_weights, save_weights
from .pool import Chunk, build_pool, build_pooled_index, load_pool, pool_stats, save_pool
from .retrieval import (init_params, initial_selection, intra_scores, load_params,
                        ranking_record, save_params, select_top_n, write_rankings)
from .synth import SyntheticTaskSpec, generate_task
from .trainer import TrainConfig, train, write_history


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _pick(args_value, cfg: dict, section: str, key: str, default):
    """Flags win over config-file values, which win over defaults."""
    if args_value is not None:
        return args_value
    sec = cfg.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    return sec.get(key, default)


def _model_config(args, cfg) -> ModelConfig:
    try:
        return ModelConfig(
            embed_dim=int(_pick(None, cfg, "model", "embed_dim", 32)),
            head_dim=int(_pick(None, cfg, "model", "head_dim", 8)),
            n_heads=int(_pick(None, cfg, "model", "n_heads", 4)),
            n_kv_heads=int(_pick(None, cfg, "model", "n_kv_heads", 2)),
            n_enc_layers=int(_pick(None, cfg, "model", "n_enc_layers", 2)),
            n_dec_layers=int(_pick(None, cfg, "model", "n_dec_layers", 2)),
            vocab_size=int(_pick(getattr(args, "vocab_size", None), cfg, "model",
                                 "vocab_size", 2048)),
            dtype=str(_pick(getattr(args, "dtype", None), cfg, "model", "dtype", "float64")),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _weights(args, cfg):
    weights_path = _pick(getattr(args, "weights", None), cfg, "model", "weights_path", None)
    if weights_path and Path(weights_path).exists():
        return load_weights(weights_path)
    config = _model_config(args, cfg)
    seed = int(_pick(getattr(args, "model_seed", None), cfg, "model", "seed", 0))
    return init_weights(config, seed=seed)


def _pool_and_index(args, cfg):
    pool_path = _pick(args.pool, cfg, "paths", "pool", None)
    if pool_path is None:
        raise ConfigError("missing pool path (--pool or paths.pool)")
    chunks_path = _pick(getattr(args, "chunks_file", None), cfg, "paths", "chunks", None)
    tokens_by_id = read_chunks(chunks_path) if chunks_path else None
    return load_pool(pool_path, tokens_by_id)


def _gen_config(args, cfg) -> GenerationConfig:
    try:
        return GenerationConfig(
            n_initial=int(_pick(getattr(args, "n0", None), cfg, "retrieval", "n_initial", 8)),
            n_final=int(_pick(getattr(args, "n", None), cfg, "retrieval", "n_final", 5)),
            n_retrieval_tokens=int(_pick(getattr(args, "R", None), cfg, "retrieval",
                                         "n_retrieval_tokens", 8)),
            pooled_len=int(_pick(getattr(args, "Lp", None), cfg, "retrieval", "pooled_len", 3)),
            max_answer_len=int(_pick(getattr(args, "max_len", None), cfg, "retrieval",
                                     "max_answer_len", 16)),
            context_mode=str(_pick(getattr(args, "context_mode", None), cfg, "retrieval",
                                   "context_mode", "four_plus_one")),
            initial_metric=str(_pick(getattr(args, "s0_metric", None), cfg, "retrieval",
                                     "initial_metric", "maxsim")),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = _load_config(args.config)
    spec = SyntheticTaskSpec(
        seed=int(_pick(args.seed, cfg, "synth", "seed", 0)),
        n_chunks=int(_pick(args.chunks, cfg, "synth", "n_chunks", 256)),
        chunk_len=int(_pick(args.chunk_len, cfg, "synth", "chunk_len", 24)),
        vocab_size=int(_pick(args.vocab_size, cfg, "synth", "vocab_size", 2048)),
        n_examples=int(_pick(args.examples, cfg, "synth", "n_examples", 96)),
        hops=int(_pick(args.hops, cfg, "synth", "hops", 2)),
        key_tokens_per_oracle=int(_pick(args.key_tokens, cfg, "synth",
                                        "key_tokens_per_oracle", 3)),
        distractor_overlap=float(_pick(args.overlap, cfg, "synth",
                                       "distractor_overlap", 0.12)),
    )
    task = generate_task(spec)
    out = Path(args.out_dir)
    write_chunks(out / "chunks.jsonl", [c.chunk_id for c in task.chunks],
                 [c.tokens for c in task.chunks])
    write_dataset(out / "train.jsonl", task.train_examples)
    write_dataset(out / "eval.jsonl", task.eval_examples)
    atomic_write_text(out / "corpus_meta.json", json.dumps(task.meta, indent=2) + "\n")
    _log(f"gen-corpus: {task.meta['n_chunks']} chunks, "
         f"{task.meta['n_train']} train / {task.meta['n_eval']} eval examples -> {out}")
    return 0


def cmd_encode_pool(args):
    cfg = _load_config(args.config)
    chunks_path = _pick(args.chunks_file, cfg, "paths", "chunks", None)
    if chunks_path is None:
        raise ConfigError("missing chunks file (--chunks-file or paths.chunks)")
    tokens_by_id = read_chunks(chunks_path)
    weights = _weights(args, cfg)
    gen = _gen_config(args, cfg)
    chunks = [Chunk(cid, toks) for cid, toks in tokens_by_id.items()]
    pool = build_pool(chunks, weights)
    pooled = build_pooled_index(pool, gen.pooled_len)
    save_pool(pool, pooled, args.out, precision=args.precision)
    if args.save_weights:
        save_weights(weights, args.save_weights)
    _log(f"encode-pool: {pool.M} chunks / {pool.N} tokens at {args.precision} -> {args.out}")
    return 0


def cmd_train_retrieval(args):
    cfg = _load_config(args.config)
    weights = _weights(args, cfg)
    pool, pooled = _pool_and_index(args, cfg)
    dataset = read_dataset(_pick(args.train_file, cfg, "paths", "train_dataset", None)
                           or _fail_cfg("train dataset path"))
    gen = _gen_config(args, cfg)
    tc = TrainConfig(
        steps=int(_pick(args.steps, cfg, "train", "steps", 500)),
        lr=float(_pick(args.lr, cfg, "train", "lr", 3e-3)),
        warmup_steps=int(_pick(args.warmup, cfg, "train", "warmup_steps", 20)),
        batch_size=int(_pick(args.batch, cfg, "train", "batch_size", 16)),
        seed=int(_pick(args.seed, cfg, "train", "seed", 0)),
        n_initial=gen.n_initial,
    )
    params = init_params(weights.config, gen.n_retrieval_tokens,
                         seed=int(_pick(args.params_seed, cfg, "train", "params_seed", 0)))
    params, history = train(dataset, params, pool, pooled, weights, tc)
    save_params(params, args.out_params)
    if args.history:
        write_history(args.history, history)
    _log(f"train-retrieval: {tc.steps} steps, loss {history[0]['loss']:.4f} -> "
         f"{history[-1]['loss']:.4f}, params -> {args.out_params}")
    return 0


def _fail_cfg(what: str):
    raise ConfigError(f"missing {what}")


def cmd_retrieve(args):
    cfg = _load_config(args.config)
    weights = _weights(args, cfg)
    pool, pooled = _pool_and_index(args, cfg)
    gen = _gen_config(args, cfg)
    dataset = read_dataset(_pick(args.dataset, cfg, "paths", "eval_dataset", None)
                           or _fail_cfg("dataset path"))
    params = load_params(args.params) if args.params else init_params(
        weights.config, gen.n_retrieval_tokens)
    records = []
    for ex in dataset:
        scores0, initial = initial_selection(weights, ex.question, pooled, gen.n_initial,
                                             metric=gen.initial_metric)
        if args.stage in ("initial", "both"):
            records.append(ranking_record(ex.id, "initial",
                                          select_top_n(scores0, gen.n_final),
                                          scores0, pool.chunk_ids))
        if args.stage in ("intra", "both"):
            scores = intra_scores(weights, ex.question, params, initial, pool, pooled)
            records.append(ranking_record(ex.id, "intra",
                                          select_top_n(scores, gen.n_final),
                                          scores, pool.chunk_ids, params.params_hash()))
    write_rankings(args.out, records)
    _log(f"retrieve: {len(records)} rankings -> {args.out}")
    return 0


def cmd_answer(args):
    cfg = _load_config(args.config)
    weights = _weights(args, cfg)
    pool, pooled = _pool_and_index(args, cfg)
    gen = _gen_config(args, cfg)
    params = load_params(args.params) if args.params else init_params(
        weights.config, gen.n_retrieval_tokens)
    if args.question:
        question = np.array([int(t) for t in args.question.split(",")], dtype=np.int64)
    elif args.example_id is not None and args.dataset:
        examples = {ex.id: ex for ex in read_dataset(args.dataset)}
        if args.example_id not in examples:
            raise DataError(f"example id {args.example_id} not in {args.dataset}")
        question = examples[args.example_id].question
    else:
        raise ConfigError("answer needs --question or (--example-id and --dataset)")
    tokens = qa_mod.answer(weights, question, params, pool, pooled, gen)
    print(" ".join(str(t) for t in tokens))
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    weights = _weights(args, cfg)
    pool, pooled = _pool_and_index(args, cfg)
    gen = _gen_config(args, cfg)
    params = load_params(args.params) if args.params else init_params(
        weights.config, gen.n_retrieval_tokens)
    dataset = read_dataset(_pick(args.dataset, cfg, "paths", "eval_dataset", None)
                           or _fail_cfg("dataset path"))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    report = qa_mod.evaluate(weights, dataset, params, pool, pooled, modes=modes,
                             gen_config=gen, seed=int(args.seed or 0))
    qa_mod.write_report(report, args.out, args.out_csv)
    for mode, row in report.modes.items():
        _log(f"eval[{mode}]: recall@5={row['recall@5']:.3f} em={row['em']:.3f} "
             f"f1={row['f1']:.3f} (n={row['n']})")
    if report.gap_closure is not None:
        _log(f"eval: gap_closure={report.gap_closure:.1f}%")
    return 0


def cmd_bench(args):
    cfg = _load_config(args.config)
    weights = _weights(args, cfg)
    pool, _ = _pool_and_index(args, cfg)
    if pool.tokens is None:
        raise ConfigError("bench needs --chunks-file so rag mode can re-encode tokens")
    seed = int(_pick(args.seed, cfg, "bench", "seed", 0))
    rng = np.random.default_rng(seed)
    L_q = int(_pick(args.Lq, cfg, "bench", "question_len", 32))
    question = rng.integers(2, weights.config.vocab_size, size=L_q)
    order = rng.permutation(pool.M)
    setup = bench_mod.BenchSetup(weights=weights, pool=pool, question=question,
                                 chunk_order=order, seed=seed,
                                 full_context_max_chunks=int(_pick(
                                     args.full_cap, cfg, "bench", "full_context_max_chunks", 64)))
    values = [int(v) for v in args.values.split(",")]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bench_mod.sweep(setup, args.axis, values, modes, out_path=args.out,
                    reps=int(_pick(args.reps, cfg, "bench", "reps", 10)),
                    warmup=int(_pick(args.warmup, cfg, "bench", "warmup", 3)))
    _log(f"bench: {len(modes) * len(values)} rows -> {args.out}")
    return 0


def cmd_cost_model(args):
    params = bench_mod.CostParams(M=args.M, L_c=args.Lc, L_q=args.Lq, k=args.k, L_g=args.Lg)
    units = bench_mod.cost_model(params, args.mode)
    for key in ("pre_query", "retrieval", "prefill", "generation"):
        print(f"{key}={units[key]}")
    return 0


def cmd_pool_stats(args):
    cfg = _load_config(args.config)
    pool, _ = _pool_and_index(args, cfg)
    config = _model_config(args, cfg)
    print(json.dumps(pool_stats(pool, config), indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pool=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        if pool:
            p.add_argument("--pool", help="pool file path")
            p.add_argument("--chunks-file", dest="chunks_file", help="chunk JSONL path")
            p.add_argument("--weights", help="weight checkpoint path")
            p.add_argument("--model-seed", dest="model_seed", type=int)
            p.add_argument("--dtype", choices=("float32", "float64"))
            p.add_argument("--vocab-size", dest="vocab_size", type=int)
            p.add_argument("--n0", type=int, help="initial-selection size")
            p.add_argument("--n", type=int, help="final-selection size")
            p.add_argument("--R", type=int, help="retrieval-token count")
            p.add_argument("--Lp", type=int, help="pooled rows per chunk")
            p.add_argument("--max-len", dest="max_len", type=int)
            p.add_argument("--context-mode", dest="context_mode",
                           choices=("four_plus_one", "top5"))
            p.add_argument("--s0-metric", dest="s0_metric", choices=("maxsim", "cosine"))

    p = sub.add_parser("gen-corpus", help="write a synthetic chunk corpus and QA splits")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--chunks", type=int, help="corpus size M")
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--examples", type=int)
    p.add_argument("--hops", type=int, choices=(1, 2))
    p.add_argument("--key-tokens", dest="key_tokens", type=int)
    p.add_argument("--overlap", type=float)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("encode-pool", help="encode chunks into a pool file")
    common(p, pool=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", choices=("f32", "int8"), default="f32")
    p.add_argument("--save-weights", dest="save_weights")
    p.set_defaults(func=cmd_encode_pool)

    p = sub.add_parser("train-retrieval", help="train probe embeddings and layer-head weights")
    common(p, pool=True)
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--out-params", dest="out_params", required=True)
    p.add_argument("--history")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--params-seed", dest="params_seed", type=int)
    p.set_defaults(func=cmd_train_retrieval)

    p = sub.add_parser("retrieve", help="rank chunks for every dataset question")
    common(p, pool=True)
    p.add_argument("--dataset")
    p.add_argument("--params")
    p.add_argument("--stage", choices=("initial", "intra", "both"), default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("answer", help="answer one question end to end")
    common(p, pool=True)
    p.add_argument("--params")
    p.add_argument("--question", help="comma-separated token ids")
    p.add_argument("--example-id", dest="example_id", type=int)
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("eval", help="evaluate retrieval modes and baselines")
    common(p, pool=True)
    p.add_argument("--dataset")
    p.add_argument("--params")
    p.add_argument("--modes", default="initial,rerank,intra")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure TTFT/throughput across prefill strategies")
    common(p, pool=True)
    p.add_argument("--axis", choices=("k", "L_c"), default="k")
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--modes", default="rag,intra")
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--Lq", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--full-cap", dest="full_cap", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost-model", help="print analytic unit counts for one mode")
    p.add_argument("--mode", required=True, choices=("full", "rag", "intra"))
    p.add_argument("--M", type=int, default=512)
    p.add_argument("--Lc", type=int, required=True)
    p.add_argument("--Lq", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--Lg", type=int, default=128)
    p.set_defaults(func=cmd_cost_model)

    p = sub.add_parser("pool-stats", help="report pool size and cache compression")
    common(p, pool=True)
    p.set_defaults(func=cmd_pool_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IntraError as err:
        print(f"error code={err.exit_code} kind={type(err).__name__} msg={err}",
              file=sys.stderr)
        return err.exit_code
    except (ValueError, KeyError) as err:
        print(f"error code=2 kind={type(err).__name__} msg={err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
