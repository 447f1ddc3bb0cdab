"""Literal-formula reference implementations used by the tests."""

import math

import numpy as np


def ndcg_oracle(run, qrels, k):
    scores = []
    for qid in sorted(qrels):
        gains = qrels[qid]
        if sum(gains.values()) <= 0:
            continue
        ranked = [doc for doc, _ in run.get(qid, [])]
        dcg = 0.0
        for r in range(1, min(k, len(ranked)) + 1):
            dcg += gains.get(ranked[r - 1], 0) / math.log2(r + 1)
        ideal = sorted(gains.values(), reverse=True)
        idcg = 0.0
        for r in range(1, min(k, len(ideal)) + 1):
            idcg += ideal[r - 1] / math.log2(r + 1)
        scores.append(dcg / idcg)
    return sum(scores) / len(scores) if scores else 0.0


def accuracy_oracle(run, qrels):
    hits = total = 0
    for qid, gains in qrels.items():
        if sum(gains.values()) <= 0:
            continue
        total += 1
        ranked = run.get(qid, [])
        if ranked and gains.get(ranked[0][0], 0) > 0:
            hits += 1
    return hits / total if total else 0.0


def recall_oracle(run, qrels, k):
    vals = []
    for qid, gains in qrels.items():
        rel = [d for d, g in gains.items() if g > 0]
        if not rel:
            continue
        top = [d for d, _ in run.get(qid, [])[:k]]
        vals.append(sum(1 for d in rel if d in top) / len(rel))
    return sum(vals) / len(vals) if vals else 0.0


def search_oracle(doc_ids, D, Q, k):
    out = []
    for q in Q:
        scored = [(float(np.dot(q, d)), doc) for doc, d in zip(doc_ids, D)]
        scored.sort(key=lambda p: (-p[0], p[1]))
        out.append([doc for _, doc in scored[:k]])
    return out


def random_qrels_run(rng, n_queries=5, n_docs=12):
    docs = [f"d{i:02d}" for i in range(n_docs)]
    qrels, run = {}, {}
    for q in range(n_queries):
        qid = f"q{q}"
        judged = rng.choice(docs, size=int(rng.integers(1, 6)), replace=False)
        qrels[qid] = {str(d): int(rng.integers(0, 4)) for d in judged}
        if rng.random() < 0.1:
            continue  # query missing from the run
        ranked = rng.permutation(docs)[: int(rng.integers(0, n_docs + 1))]
        scores = np.sort(rng.random(len(ranked)))[::-1]
        run[qid] = [(str(d), float(s)) for d, s in zip(ranked, scores)]
    return qrels, run


def softmax_xent_oracle(Q, Pos, tau):
    """Cross-entropy of each query against all in-batch positives, straight-line."""
    n = len(Q)
    unit = lambda v: v / math.sqrt(sum(x * x for x in v))
    Qn = [unit(q) for q in Q]
    Pn = [unit(p) for p in Pos]
    total = 0.0
    for i in range(n):
        logits = [float(np.dot(Qn[i], Pn[j])) / tau for j in range(n)]
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(l - mx) for l in logits))
        total += lse - logits[i]
    return total / n
