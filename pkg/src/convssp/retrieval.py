"""Dense indexing, exact nearest-neighbor search, ranking metrics, and the
off-topic robustness protocol.

Documents are embedded once by the frozen teacher and held in an immutable
matrix; search is exact brute-force inner product with ties broken by
ascending doc_id.  MRR counts the reciprocal rank of the first document at
or above the positive grade threshold; NDCG@3 uses exponential gains
(2^rel - 1) with a log2 rank discount by default.

Run and qrels files follow the TREC interchange formats::

    run:   query_id Q0 doc_id rank score tag
    qrels: query_id 0 doc_id grade
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .data import Conversation, Document, Vocabulary, build_model_input
from .encoder import EncoderConfig, encode
from .tasks import _base_conversation_id


class EvalError(ValueError):
    """Bad evaluation input (empty run, malformed file, ...)."""


@dataclass
class DenseIndex:
    """Immutable matrix of document vectors aligned with doc_ids."""

    doc_ids: list[str]
    vectors: np.ndarray  # [docs, hidden]
    metric: str = "inner-product"

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.doc_ids):
            raise EvalError("index rows do not align with doc_ids")


RankedRun = dict[str, list[tuple[str, float]]]
Qrels = dict[tuple[str, str], int]


def encode_text_vector(
    text: str,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    max_len: int = 256,
) -> np.ndarray:
    """[CLS] vector of a single piece of text (query rewrite or document)."""
    mi = build_model_input(Conversation("text", (text,)), vocab, max_len)
    return encode(mi, params, config, train=False).cls_vector.data.copy()


def index_corpus(
    documents: Sequence[Document],
    teacher_params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    max_len: int = 256,
) -> DenseIndex:
    """Embed every document with the frozen teacher and assemble the index."""
    if not documents:
        raise EvalError("cannot index an empty corpus")
    vectors = np.stack(
        [
            encode_text_vector(doc.text, teacher_params, config, vocab, max_len)
            for doc in documents
        ]
    )
    return DenseIndex(doc_ids=[doc.doc_id for doc in documents], vectors=vectors)


def search(index: DenseIndex, query_vector: np.ndarray, top_k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; ties break by ascending doc_id."""
    if top_k < 1:
        raise EvalError(f"top_k must be >= 1, got {top_k}")
    scores = index.vectors @ np.asarray(query_vector, dtype=np.float64)
    order = np.lexsort((np.asarray(index.doc_ids), -scores))
    top = order[: min(top_k, len(order))]
    return [(index.doc_ids[i], float(scores[i])) for i in top]


def encode_conversation_vector(
    conversation: Conversation,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    max_len: int = 256,
) -> np.ndarray:
    mi = build_model_input(conversation, vocab, max_len)
    return encode(mi, params, config, train=False).cls_vector.data.copy()


def run_retrieval(
    conversations: Sequence[Conversation],
    params: dict[str, Tensor],
    index: DenseIndex,
    config: EncoderConfig,
    vocab: Vocabulary,
    max_len: int = 256,
    top_k: int = 20,
) -> RankedRun:
    """Encode each conversation's search intent and rank the corpus for it."""
    run: RankedRun = {}
    for conv in conversations:
        qvec = encode_conversation_vector(conv, params, config, vocab, max_len)
        run[conv.conv_id] = search(index, qvec, top_k)
    return run


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _judged_queries(run: RankedRun, qrels: Qrels, skip_unjudged: bool) -> list[str]:
    if not run:
        raise EvalError("empty run")
    judged = {qid for qid, _ in qrels}
    if skip_unjudged:
        return [qid for qid in run if qid in judged]
    return list(run)


def mrr(
    run: RankedRun,
    qrels: Qrels,
    positive_threshold: int = 2,
    skip_unjudged: bool = True,
) -> float:
    """Mean reciprocal rank of the first positively judged document.

    A query with no positive document in its ranking scores 0.  Queries
    absent from the qrels are skipped unless ``skip_unjudged`` is False.
    """
    queries = _judged_queries(run, qrels, skip_unjudged)
    if not queries:
        return 0.0
    total = 0.0
    for qid in queries:
        for rank, (doc_id, _score) in enumerate(run[qid], start=1):
            if qrels.get((qid, doc_id), 0) >= positive_threshold:
                total += 1.0 / rank
                break
    return total / len(queries)


def _gain(rel: int, exponential: bool) -> float:
    return (2.0**rel - 1.0) if exponential else float(rel)


def ndcg_at_3(
    run: RankedRun,
    qrels: Qrels,
    exponential_gain: bool = True,
    skip_unjudged: bool = True,
) -> float:
    """Normalized discounted cumulative gain over the top 3 results."""
    queries = _judged_queries(run, qrels, skip_unjudged)
    if not queries:
        return 0.0
    grades_by_query: dict[str, list[int]] = {}
    for (qid, _doc), grade in qrels.items():
        grades_by_query.setdefault(qid, []).append(grade)
    total = 0.0
    for qid in queries:
        dcg = 0.0
        for rank, (doc_id, _score) in enumerate(run[qid][:3], start=1):
            rel = qrels.get((qid, doc_id), 0)
            dcg += _gain(rel, exponential_gain) / math.log2(rank + 1)
        ideal = sorted(grades_by_query.get(qid, []), reverse=True)[:3]
        idcg = sum(
            _gain(rel, exponential_gain) / math.log2(rank + 1)
            for rank, rel in enumerate(ideal, start=1)
        )
        total += (dcg / idcg) if idcg > 0 else 0.0
    return total / len(queries)


# ---------------------------------------------------------------------------
# TREC interchange files
# ---------------------------------------------------------------------------


def write_run(run: RankedRun, path, tag: str = "convssp") -> None:
    """Write ``query_id Q0 doc_id rank score tag`` lines, rank 1-based."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in run:
            for rank, (doc_id, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path) -> RankedRun:
    run: RankedRun = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise EvalError(
                    f"{path}:{lineno}: expected 6 whitespace-separated fields, "
                    f"got {len(parts)}"
                )
            qid, _q0, doc_id, rank_s, score_s, _tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise EvalError(f"{path}:{lineno}: bad rank/score: {exc}") from exc
            rows = run.setdefault(qid, [])
            if rank != len(rows) + 1:
                raise EvalError(
                    f"{path}:{lineno}: rank {rank} out of order for query {qid!r}"
                )
            rows.append((doc_id, score))
    return run


def read_qrels(path) -> Qrels:
    """Parse ``query_id 0 doc_id grade`` lines; tolerant of repeated blanks."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EvalError(
                    f"{path}:{lineno}: expected 4 whitespace-separated fields, "
                    f"got {len(parts)}"
                )
            qid, _iter, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError as exc:
                raise EvalError(f"{path}:{lineno}: bad grade {grade_s!r}") from exc
            if grade < 0:
                raise EvalError(f"{path}:{lineno}: negative grade {grade}")
            qrels[(qid, doc_id)] = grade
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), grade in qrels.items():
            fh.write(f"{qid} 0 {doc_id} {grade}\n")


_INDEX_MAGIC = b"SSPIDX01"


def save_index(index: DenseIndex, path, vocab_sha256: str = "") -> None:
    """Single-file index: JSON header (doc ids, shape, vocab hash) + raw
    float64 payload.  Deterministic bytes for identical inputs."""
    import json
    import struct

    header = {
        "doc_ids": index.doc_ids,
        "shape": list(index.vectors.shape),
        "metric": index.metric,
        "vocab_sha256": vocab_sha256,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(index.vectors, dtype=np.float64).tobytes())


def load_index(path, expected_vocab_sha256: str | None = None) -> DenseIndex:
    import json
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_INDEX_MAGIC) + 4 or raw[: len(_INDEX_MAGIC)] != _INDEX_MAGIC:
        raise EvalError(f"{path}: not an index file (bad magic)")
    (header_len,) = struct.unpack_from("<I", raw, len(_INDEX_MAGIC))
    start = len(_INDEX_MAGIC) + 4
    try:
        header = json.loads(raw[start : start + header_len])
    except json.JSONDecodeError as exc:
        raise EvalError(f"{path}: unreadable index header") from exc
    if expected_vocab_sha256 and header.get("vocab_sha256") not in ("", expected_vocab_sha256):
        raise EvalError(f"{path}: vocabulary hash mismatch")
    shape = tuple(header["shape"])
    payload = raw[start + header_len :]
    expected_bytes = int(np.prod(shape)) * 8
    if len(payload) < expected_bytes:
        raise EvalError(f"{path}: truncated index payload")
    vectors = np.frombuffer(payload[:expected_bytes], dtype=np.float64).reshape(shape).copy()
    return DenseIndex(doc_ids=list(header["doc_ids"]), vectors=vectors, metric=header["metric"])


# ---------------------------------------------------------------------------
# robustness protocol
# ---------------------------------------------------------------------------


@dataclass
class RobustnessPoint:
    added: int
    mrr: float
    ndcg3: float


def _sample_offtopic_utterances(
    conversation: Conversation,
    noise_pool: Sequence[Conversation],
    count: int,
    rng: np.random.Generator,
) -> list[str]:
    base = _base_conversation_id(conversation.conv_id)
    utterances = [
        q
        for conv in noise_pool
        if _base_conversation_id(conv.conv_id) != base
        for q in conv.queries
    ]
    if len(utterances) < count:
        raise EvalError(
            f"noise pool provides {len(utterances)} off-topic utterances; "
            f"{count} requested"
        )
    picks = rng.choice(len(utterances), size=count, replace=False)
    return [utterances[int(i)] for i in picks]


def perturb_for_robustness(
    conversation: Conversation,
    noise_pool: Sequence[Conversation],
    added: int,
    seed: int,
    position: int,
) -> Conversation:
    """Prepend ``added`` randomly sampled off-topic utterances (fixed seed)."""
    if added == 0:
        return conversation
    rng = np.random.default_rng([seed, 15373, added, position])
    noise = _sample_offtopic_utterances(conversation, noise_pool, added, rng)
    return Conversation(
        conv_id=conversation.conv_id,
        queries=tuple(noise) + conversation.queries,
        reformulated_last=conversation.reformulated_last,
        source_tag=conversation.source_tag,
    )


def robustness_eval(
    params: dict[str, Tensor],
    conversations: Sequence[Conversation],
    noise_pool: Sequence[Conversation],
    max_added: int,
    index: DenseIndex,
    qrels: Qrels,
    config: EncoderConfig,
    vocab: Vocabulary,
    seed: int = 0,
    max_len: int = 256,
    top_k: int = 20,
    positive_threshold: int = 2,
    exponential_gain: bool = True,
) -> list[RobustnessPoint]:
    """Metric degradation curve for j = 0..max_added prepended utterances."""
    if max_added < 0:
        raise EvalError("max_added must be >= 0")
    curve = []
    for added in range(max_added + 1):
        perturbed = [
            perturb_for_robustness(conv, noise_pool, added, seed, pos)
            for pos, conv in enumerate(conversations)
        ]
        run = run_retrieval(perturbed, params, index, config, vocab, max_len, top_k)
        curve.append(
            RobustnessPoint(
                added=added,
                mrr=mrr(run, qrels, positive_threshold),
                ndcg3=ndcg_at_3(run, qrels, exponential_gain),
            )
        )
    return curve


def write_curve_csv(curve: Sequence[RobustnessPoint], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("j,mrr,ndcg3\n")
        for point in curve:
            fh.write(f"{point.added},{point.mrr!r},{point.ndcg3!r}\n")
