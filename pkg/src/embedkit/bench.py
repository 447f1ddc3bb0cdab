"""Encoding throughput and padded-vs-packed batching.

Wall-clock numbers are noisy, so every report also carries exact counts of
real and padding positions taken from the encoder's instrumentation. These
counts depend only on the corpus, the seed and the strategy.

One timed pass encodes the whole corpus once. ``measured_batches`` is the
number of timed passes; the fastest one is reported (best-of-N, as in
``timeit``), so ``total_docs`` always equals the corpus size.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc

STRATEGIES = ("padded", "sorted_packed")


@dataclass(frozen=True)
class BenchConfig:
    batch_size: int = 32
    msl: int = 64
    strategy: str = "padded"
    warmup_batches: int = 3
    measured_batches: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.msl < 1:
            raise ValueError("batch_size and msl must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.warmup_batches < 0:
            raise ValueError("warmup_batches must be non-negative")
        if self.measured_batches < 1:
            raise ValueError("measured_batches must be >= 1")


@dataclass
class ThroughputReport:
    docs_per_second: float
    total_docs: int
    wall_seconds: float
    strategy: str
    real_tokens: int = 0
    padding_tokens: int = 0
    batches: list[tuple[int, ...]] = field(default_factory=list)  # corpus indices per batch
    relative_percent: float | None = None
    reference: str | None = None


def batch_order(corpus: Sequence[Sequence[int]], bconfig: BenchConfig, max_doc_len: int) -> list[list[int]]:
    """Corpus indices grouped into batches for ``bconfig.strategy``.

    Both strategies start from the same seeded shuffle; ``sorted_packed``
    then stable-sorts by (truncated) length so batch members are similar in
    length.
    """
    order = np.random.default_rng(bconfig.seed).permutation(len(corpus))
    if bconfig.strategy == "sorted_packed":
        lengths = np.array([min(len(corpus[i]), max_doc_len) for i in order])
        order = order[np.argsort(lengths, kind="stable")]
    bs = bconfig.batch_size
    return [order[i : i + bs].tolist() for i in range(0, len(order), bs)]


def run_throughput(weights, config: enc.EncoderConfig, corpus: Sequence[Sequence[int]],
                   bconfig: BenchConfig) -> ThroughputReport:
    """Time the encoding of ``corpus`` under one batching strategy."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if bconfig.msl > config.max_len:
        raise ValueError(f"msl {bconfig.msl} exceeds model max_len {config.max_len}")
    doc_len = bconfig.msl - config.special_len
    if doc_len < 1:
        raise ValueError("msl leaves no room for document tokens")
    docs = [list(d)[:doc_len] for d in corpus]
    groups = batch_order(docs, bconfig, doc_len)
    batches = [[docs[i] for i in g] for g in groups]

    for b in batches[: bconfig.warmup_batches]:
        enc.forward(weights, config, b)

    best, stats = math.inf, {}
    for _ in range(bconfig.measured_batches):
        stats = {}
        t0 = time.perf_counter()
        for b in batches:
            enc.forward(weights, config, b, stats)
        best = min(best, time.perf_counter() - t0)
    best = max(best, 1e-9)
    return ThroughputReport(
        docs_per_second=len(docs) / best,
        total_docs=len(docs),
        wall_seconds=best,
        strategy=bconfig.strategy,
        real_tokens=stats["tokens"],
        padding_tokens=stats["padding_tokens"],
        batches=[tuple(g) for g in groups],
    )


def _dps(x) -> float:
    return float(x.docs_per_second if isinstance(x, ThroughputReport) else x)


def relative_speed(report, reference) -> float:
    """Throughput as a percentage of ``reference``, one decimal.

    Either argument may be a report or a plain docs/s number.
    """
    ref = _dps(reference)
    if not ref > 0:
        raise ValueError("reference throughput must be positive")
    return round(100.0 * _dps(report) / ref, 1)


def padding_delta(before, after) -> float:
    """Percent change in throughput from ``before`` to ``after``, one decimal."""
    a = _dps(before)
    if a == 0:
        raise ValueError("baseline throughput is zero")
    return round(100.0 * (_dps(after) - a) / a, 1)


def count_parameters(weights) -> int:
    return int(sum(np.asarray(w).size for w in weights.values()))


def write_report_csv(rows, path, reference: str | None = None) -> None:
    """Throughput table, one row per ``(label, weights, config, report)``.

    Relative speed is computed against the row labelled ``reference``
    (the first row when omitted).
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    ref_row = next((r for r in rows if r[0] == reference), rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Model", "Parameters", "Embedding Size", "Encoding Speed (Docs/s)",
                    f"Rel to {ref_row[0]}", "Strategy", "Real Tokens", "Padding Tokens"])
        for label, weights, config, rep in rows:
            w.writerow([label, count_parameters(weights), config.dim, f"{rep.docs_per_second:.0f}",
                        f"{relative_speed(rep, ref_row[3]):.1f}%", rep.strategy,
                        rep.real_tokens, rep.padding_tokens])
