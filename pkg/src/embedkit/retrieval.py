"""Exact dense retrieval and ranking metrics.

Qrels are ``{query_id: {doc_id: gain}}``; runs are
``{query_id: [(doc_id, score), ...]}`` in descending score order. Ties are
always broken by ascending doc id.

NDCG uses linear gains, ``gain / log2(rank + 1)``. Queries whose judged
gains sum to zero are dropped from every mean, with a logged warning.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import encoder as enc

log = logging.getLogger(__name__)

Qrels = dict[str, dict[str, int]]
Run = dict[str, list[tuple[str, float]]]


@dataclass
class IndexedCorpus:
    """Document ids with unit-norm embedding rows."""

    doc_ids: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        self.doc_ids = [str(d) for d in self.doc_ids]
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.doc_ids):
            raise ValueError("embedding rows must match doc ids")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc ids must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("index rows must be unit-norm")
        # position of each doc in ascending-id order, used as the tie-break key
        self._id_rank = np.empty(len(self.doc_ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.doc_ids, dtype=object), kind="stable")] = np.arange(len(self.doc_ids))

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def search(index: IndexedCorpus, query_embeddings, k: int, query_ids: Sequence[str] | None = None) -> Run:
    """Exact top-``k`` by dot product of unit rows (cosine)."""
    Qe = np.asarray(query_embeddings, dtype=np.float64)
    if Qe.ndim != 2 or Qe.shape[1] != index.dim:
        raise ValueError(f"query dim {Qe.shape[-1]} != index dim {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if query_ids is None:
        query_ids = [str(i) for i in range(Qe.shape[0])]
    scores = Qe @ index.embeddings.T
    kk = min(k, len(index.doc_ids))
    run: Run = {}
    for qid, row in zip(query_ids, scores):
        order = np.lexsort((index._id_rank, -row))[:kk]
        run[str(qid)] = [(index.doc_ids[j], float(row[j])) for j in order]
    return run


def _scoreable(qrels: Qrels) -> list[str]:
    keep = []
    for qid in sorted(qrels):
        if sum(qrels[qid].values()) > 0:
            keep.append(qid)
        else:
            log.warning("query %s has no relevant documents; excluded from metrics", qid)
    return keep


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 10):
    """Per-query NDCG@k and its mean over scoreable judged queries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query = {}
    for qid in _scoreable(qrels):
        gains = qrels[qid]
        ranked = run.get(qid, [])[:k]
        dcg = sum(gains.get(doc, 0) / math.log2(r + 2) for r, (doc, _) in enumerate(ranked))
        ideal = sorted(gains.values(), reverse=True)[:k]
        idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal))
        per_query[qid] = dcg / idcg
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return per_query, mean


def accuracy_at_1(run: Run, qrels: Qrels) -> float:
    """Fraction of queries whose top document is relevant."""
    hits = []
    for qid in _scoreable(qrels):
        ranked = run.get(qid, [])
        hits.append(1.0 if ranked and qrels[qid].get(ranked[0][0], 0) > 0 else 0.0)
    return float(np.mean(hits)) if hits else 0.0


def recall_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    """Mean fraction of each query's relevant documents found in the top ``k``."""
    vals = []
    for qid in _scoreable(qrels):
        relevant = {d for d, g in qrels[qid].items() if g > 0}
        top = {doc for doc, _ in run.get(qid, [])[:k]}
        vals.append(len(relevant & top) / len(relevant))
    return float(np.mean(vals)) if vals else 0.0


class AggregateScore(NamedTuple):
    mean: float
    rounded: float


def aggregate_benchmark(per_task_scores: Mapping[str, float], decimals: int = 1) -> AggregateScore:
    """Unweighted mean over tasks, plus the mean rounded for reporting."""
    if not per_task_scores:
        raise ValueError("no task scores to aggregate")
    mean = math.fsum(per_task_scores.values()) / len(per_task_scores)
    return AggregateScore(mean, round(mean, decimals))


# --------------------------------------------------------------------------
# model-level evaluation


@dataclass
class EvalSet:
    """Tokenized queries and documents with relevance judgments."""

    queries: dict[str, list[int]]
    docs: dict[str, list[int]]
    qrels: Qrels

    def __post_init__(self):
        missing = {d for judged in self.qrels.values() for d in judged} - set(self.docs)
        if missing:
            raise ValueError(f"qrels reference unknown docs: {sorted(missing)[:5]}")


@dataclass
class SweepReport:
    axis: str
    rows: list[tuple] = field(default_factory=list)  # (axis value, {task: metric}, mean)

    def values(self) -> list:
        return [r[0] for r in self.rows]

    def means(self) -> list[float]:
        return [r[2] for r in self.rows]


def truncate_embeddings(E, k: int) -> np.ndarray:
    """Leading ``k`` coordinates, renormalized; the full width is returned as is."""
    E = np.asarray(E)
    if not 1 <= k <= E.shape[1]:
        raise ValueError(f"truncation dim {k} outside [1, {E.shape[1]}]")
    if k == E.shape[1]:
        return E
    pre = E[:, :k]
    norms = np.linalg.norm(pre, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"a prefix of length {k} is all zeros")
    return pre / norms


def score_run(run: Run, qrels: Qrels, metric: str, k: int) -> float:
    if metric == "ndcg":
        return ndcg_at_k(run, qrels, k)[1]
    if metric == "accuracy":
        return accuracy_at_1(run, qrels)
    if metric == "recall":
        return recall_at_k(run, qrels, k)
    raise ValueError(f"unknown metric {metric!r}")


def _encode_set(weights, config, eval_set: EvalSet, doc_len: int | None = None, batch_size: int = 64):
    qids = sorted(eval_set.queries)
    dids = sorted(eval_set.docs)
    docs = [eval_set.docs[d] for d in dids]
    if doc_len is not None:
        docs = [d[:doc_len] for d in docs]
    Qe = enc.encode(weights, config, [eval_set.queries[q] for q in qids], batch_size=batch_size)
    De = enc.encode(weights, config, docs, batch_size=batch_size)
    return qids, Qe, dids, De


def evaluate(weights, config, eval_set: EvalSet, k: int = 10, metric: str = "ndcg") -> float:
    """Encode, search exhaustively and score one evaluation set."""
    qids, Qe, dids, De = _encode_set(weights, config, eval_set)
    run = search(IndexedCorpus(dids, De), Qe, k, qids)
    return score_run(run, eval_set.qrels, metric, k)


def _as_tasks(eval_sets) -> dict[str, EvalSet]:
    return {"default": eval_sets} if isinstance(eval_sets, EvalSet) else dict(eval_sets)


def _check_strict_order(values, what):
    diffs = np.diff(np.asarray(values, dtype=float))
    if len(values) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise ValueError(f"{what} must be strictly increasing or strictly decreasing, got {list(values)}")


def mrl_sweep(weights, config, eval_sets, dims: Sequence[int], k: int = 10, metric: str = "ndcg") -> SweepReport:
    """Metric per task at each embedding prefix length.

    Repeated entries in ``dims`` are allowed and produce identical rows.
    """
    if len(set(dims)) == len(dims):
        _check_strict_order(dims, "dims")
    if max(dims) > config.dim:
        raise ValueError(f"dim {max(dims)} exceeds model dim {config.dim}")
    tasks = _as_tasks(eval_sets)
    encoded = {name: _encode_set(weights, config, es) for name, es in tasks.items()}
    report = SweepReport("dimension")
    for dim in dims:
        metrics = {}
        for name, (qids, Qe, dids, De) in encoded.items():
            run = search(IndexedCorpus(dids, truncate_embeddings(De, dim)), truncate_embeddings(Qe, dim), k, qids)
            metrics[name] = score_run(run, tasks[name].qrels, metric, k)
        report.rows.append((int(dim), metrics, float(np.mean(list(metrics.values())))))
    return report


def context_sweep(weights, config, eval_sets, msl_list: Sequence[int], k: int = 10,
                  metric: str = "ndcg") -> SweepReport:
    """Metric per task with documents truncated to each maximum sequence length.

    ``msl`` counts every encoder position, including a prepended CLS token.
    Queries are never truncated.
    """
    _check_strict_order(msl_list, "msl values")
    if max(msl_list) > config.max_len:
        raise ValueError(f"msl {max(msl_list)} exceeds model max_len {config.max_len}")
    if min(msl_list) <= config.special_len:
        raise ValueError("msl leaves no room for document tokens")
    tasks = _as_tasks(eval_sets)
    report = SweepReport("max_seq_len")
    for msl in msl_list:
        metrics = {}
        for name, es in tasks.items():
            qids, Qe, dids, De = _encode_set(weights, config, es, doc_len=msl - config.special_len)
            run = search(IndexedCorpus(dids, De), Qe, k, qids)
            metrics[name] = score_run(run, es.qrels, metric, k)
        report.rows.append((int(msl), metrics, float(np.mean(list(metrics.values())))))
    return report


# --------------------------------------------------------------------------
# files


def read_qrels(path) -> Qrels:
    """Lines of ``query-id 0 doc-id gain``."""
    qrels: Qrels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc, gain = parts
            qrels.setdefault(qid, {})[doc] = int(gain)
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w") as fh:
        for qid in sorted(qrels):
            for doc in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc} {qrels[qid][doc]}\n")


def read_run(path) -> Run:
    """Lines of ``query-id doc-id rank score tag``; re-sorted by rank."""
    rows: dict[str, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            qid, doc, rank, score, _ = parts
            rows.setdefault(qid, []).append((int(rank), doc, float(score)))
    return {q: [(d, s) for _, d, s in sorted(v)] for q, v in rows.items()}


def write_run(run: Run, path, tag: str = "embedkit") -> None:
    with open(path, "w") as fh:
        for qid in sorted(run):
            for rank, (doc, score) in enumerate(run[qid], 1):
                fh.write(f"{qid} {doc} {rank} {score!r} {tag}\n")


def write_sweep_csv(report: SweepReport, path) -> None:
    tasks = sorted(report.rows[0][1]) if report.rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([report.axis, *tasks, "mean"])
        for value, metrics, mean in report.rows:
            w.writerow([value, *(repr(metrics[t]) for t in tasks), repr(mean)])


def save_eval_set(eval_set: EvalSet, path) -> None:
    """JSON object with ``queries``, ``docs`` (token id lists) and ``qrels``."""
    with open(path, "w") as fh:
        json.dump({"queries": eval_set.queries, "docs": eval_set.docs, "qrels": eval_set.qrels}, fh, sort_keys=True)


def load_eval_set(path) -> EvalSet:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("queries", "docs", "qrels"):
        if key not in doc:
            raise ValueError(f"{path}: eval set is missing {key!r}")
    return EvalSet({str(k): [int(t) for t in v] for k, v in doc["queries"].items()},
                   {str(k): [int(t) for t in v] for k, v in doc["docs"].items()},
                   {str(q): {str(d): int(g) for d, g in j.items()} for q, j in doc["qrels"].items()})
