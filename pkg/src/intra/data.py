"""QA examples and their JSON-lines serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .fileio import atomic_write_text


@dataclass
class QAExample:
    id: int
    question: np.ndarray
    answer: np.ndarray
    oracle_chunk_ids: tuple

    def __post_init__(self):
        self.question = np.asarray(self.question, dtype=np.int64)
        self.answer = np.asarray(self.answer, dtype=np.int64)
        self.oracle_chunk_ids = tuple(int(c) for c in self.oracle_chunk_ids)
        if self.question.size == 0:
            raise DataError(f"example {self.id}: empty question")
        if self.answer.size == 0:
            raise DataError(f"example {self.id}: empty answer")
        if len(self.oracle_chunk_ids) == 0:
            raise DataError(f"example {self.id}: empty oracle set")


def write_dataset(path, examples: list[QAExample]) -> None:
    lines = []
    for ex in examples:
        lines.append(json.dumps({
            "id": ex.id,
            "question": [int(t) for t in ex.question],
            "answer": [int(t) for t in ex.answer],
            "oracle_chunk_ids": list(ex.oracle_chunk_ids),
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset(path) -> list[QAExample]:
    examples = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            examples.append(QAExample(obj["id"], obj["question"], obj["answer"],
                                      obj["oracle_chunk_ids"]))
        except (json.JSONDecodeError, KeyError) as err:
            raise DataError(f"malformed dataset line in {path}: {err}") from None
    if not examples:
        raise DataError(f"dataset {path} is empty")
    return examples


def write_chunks(path, chunk_ids, token_seqs) -> None:
    lines = [json.dumps({"chunk_id": int(cid), "tokens": [int(t) for t in toks]})
             for cid, toks in zip(chunk_ids, token_seqs)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_chunks(path) -> dict[int, np.ndarray]:
    """chunk_id -> token array, insertion-ordered as in the file."""
    chunks: dict[int, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"malformed chunk line in {path}: {err}") from None
        cid = int(obj["chunk_id"])
        if cid in chunks:
            raise DataError(f"duplicate chunk_id {cid} in {path}")
        chunks[cid] = np.asarray(obj["tokens"], dtype=np.int64)
    if not chunks:
        raise DataError(f"chunk file {path} is empty")
    return chunks
