"""Seeded synthetic data for the desk-scale experiments.

Ids below ``RESERVED`` (4) are kept for special tokens, so generated content
never collides with the CLS id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .retrieval import EvalSet
from .trainer import TrainingExample
from .vocab import TokenizerSpec, train_bpe

RESERVED = 4


@dataclass(frozen=True)
class ClusterDatasetSpec:
    clusters: int = 8
    examples_per_cluster: int = 32
    vocab_size: int = 64
    seq_len: tuple[int, int] = (6, 12)
    noise_rate: float = 0.1
    seed: int = 0
    negatives: int = 1
    languages: tuple[str, ...] = ("en",)
    docs_per_cluster: int = 12
    queries_per_cluster: int = 4

    def __post_init__(self):
        if self.clusters < 2:
            raise ValueError("need at least two clusters")
        if not 0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if self.vocab_size - RESERVED < self.clusters:
            raise ValueError("vocab too small for the requested clusters")
        lo, hi = self.seq_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad seq_len range {self.seq_len}")
        if not self.languages:
            raise ValueError("need at least one language tag")


@dataclass
class ClusterDataset:
    train: list[TrainingExample]
    eval: EvalSet
    cluster_of_token: np.ndarray  # -1 for reserved ids
    train_clusters: list[int] = field(default_factory=list)


def cluster_blocks(spec: ClusterDatasetSpec) -> list[np.ndarray]:
    return np.array_split(np.arange(RESERVED, spec.vocab_size), spec.clusters)


def _cluster_seq(rng, spec, blocks, c):
    length = int(rng.integers(spec.seq_len[0], spec.seq_len[1] + 1))
    own = rng.choice(blocks[c], size=length)
    noise = rng.integers(RESERVED, spec.vocab_size, size=length)
    return np.where(rng.random(length) < spec.noise_rate, noise, own).tolist()


def gen_cluster_dataset(spec: ClusterDatasetSpec) -> ClusterDataset:
    """Query/passage pairs drawn from per-cluster token distributions.

    Training negatives come from other clusters; language tags are assigned
    round-robin. The evaluation set judges every same-cluster document
    relevant (gain 1).
    """
    rng = np.random.default_rng(spec.seed)
    blocks = cluster_blocks(spec)
    train, clusters = [], []
    k = 0
    for c in range(spec.clusters):
        for _ in range(spec.examples_per_cluster):
            others = [o for o in range(spec.clusters) if o != c]
            negs = [_cluster_seq(rng, spec, blocks, int(rng.choice(others))) for _ in range(spec.negatives)]
            train.append(TrainingExample(
                query=_cluster_seq(rng, spec, blocks, c),
                positive=_cluster_seq(rng, spec, blocks, c),
                negatives=negs,
                language=spec.languages[k % len(spec.languages)],
                id=f"t{k:05d}",
            ))
            clusters.append(c)
            k += 1
    docs, queries, qrels = {}, {}, {}
    for c in range(spec.clusters):
        for j in range(spec.docs_per_cluster):
            docs[f"c{c:02d}-d{j:03d}"] = _cluster_seq(rng, spec, blocks, c)
    for c in range(spec.clusters):
        for j in range(spec.queries_per_cluster):
            qid = f"c{c:02d}-q{j:03d}"
            queries[qid] = _cluster_seq(rng, spec, blocks, c)
            qrels[qid] = {f"c{c:02d}-d{i:03d}": 1 for i in range(spec.docs_per_cluster)}
    owner = np.full(spec.vocab_size, -1)
    for c, b in enumerate(blocks):
        owner[b] = c
    return ClusterDataset(train, EvalSet(queries, docs, qrels), owner, clusters)


def oracle_token_embeddings(dataset: ClusterDataset, dim: int | None = None) -> np.ndarray:
    """One-hot cluster membership per token; reserved ids get zero rows."""
    n_clusters = int(dataset.cluster_of_token.max()) + 1
    dim = dim or n_clusters
    E = np.zeros((len(dataset.cluster_of_token), dim))
    for tok, c in enumerate(dataset.cluster_of_token):
        if c >= 0:
            E[tok, c] = 1.0
    return E


# --------------------------------------------------------------------------
# needle-in-a-haystack


@dataclass(frozen=True)
class NeedleDatasetSpec:
    haystack_len: int = 256
    needle_positions: tuple[int, ...] = (100,)
    vocab_size: int = 64
    seed: int = 0
    key_len: int = 4
    filler_vocab: int = 24

    def __post_init__(self):
        if self.key_len < 1 or self.haystack_len < self.key_len:
            raise ValueError("haystack must fit the key")
        bad = [p for p in self.needle_positions if not 0 <= p <= self.haystack_len - self.key_len]
        if bad:
            raise ValueError(f"needle positions {bad} do not fit a length-{self.haystack_len} haystack")
        if not 1 <= self.filler_vocab < self.vocab_size - RESERVED:
            raise ValueError("filler_vocab must leave room for key tokens")

    @property
    def key_ids(self) -> np.ndarray:
        return np.arange(RESERVED + self.filler_vocab, self.vocab_size)


@dataclass
class NeedleDataset:
    docs: dict[str, list[int]]
    queries: dict[str, list[int]]
    qrels: dict[str, dict[str, int]]
    positions: dict[str, int]

    def eval_set(self) -> EvalSet:
        return EvalSet(self.queries, self.docs, self.qrels)

    def training_examples(self, language: str = "en") -> list[TrainingExample]:
        return [TrainingExample(query=self.queries[q], positive=self.docs[next(iter(self.qrels[q]))],
                                language=language, id=q) for q in sorted(self.queries)]


def gen_needle_dataset(spec: NeedleDatasetSpec) -> NeedleDataset:
    """One document per needle position: filler tokens with a unique key planted.

    The query for document ``k`` is its key sequence, so it is answerable only
    if the encoder sees the key positions.
    """
    rng = np.random.default_rng(spec.seed)
    fillers = np.arange(RESERVED, RESERVED + spec.filler_vocab)
    keys_seen, hay_seen = set(), set()
    docs, queries, qrels, positions = {}, {}, {}, {}
    for k, pos in enumerate(spec.needle_positions):
        while True:
            key = tuple(int(t) for t in rng.choice(spec.key_ids, size=spec.key_len))
            if key not in keys_seen:
                break
        while True:
            hay = rng.choice(fillers, size=spec.haystack_len)
            if hay.tobytes() not in hay_seen:
                break
        keys_seen.add(key)
        hay_seen.add(hay.tobytes())
        doc = hay.tolist()
        doc[pos : pos + spec.key_len] = key
        did, qid = f"n{k:04d}-doc", f"n{k:04d}-q"
        docs[did] = doc
        queries[qid] = list(key)
        qrels[qid] = {did: 1}
        positions[did] = int(pos)
    return NeedleDataset(docs, queries, qrels, positions)


def random_needle_spec(n: int, haystack_len: int, seed: int, lo: int = 0, **kw) -> NeedleDatasetSpec:
    """Spec with ``n`` needles at seeded uniform positions in ``[lo, haystack_len - key_len]``."""
    key_len = kw.get("key_len", 4)
    rng = np.random.default_rng(seed + 7919)
    pos = tuple(int(p) for p in rng.integers(lo, haystack_len - key_len + 1, size=n))
    return NeedleDatasetSpec(haystack_len=haystack_len, needle_positions=pos, seed=seed, **kw)


# --------------------------------------------------------------------------
# benchmark corpora


def gen_length_skewed_corpus(n_docs: int = 256, short: tuple[int, int] = (8, 16), long: tuple[int, int] = (96, 128),
                             long_fraction: float = 0.1, vocab_size: int = 64, seed: int = 0) -> list[list[int]]:
    """Mostly short documents with a minority of long ones, in random order."""
    rng = np.random.default_rng(seed)
    n_long = int(round(n_docs * long_fraction))
    lengths = np.concatenate([rng.integers(short[0], short[1] + 1, size=n_docs - n_long),
                              rng.integers(long[0], long[1] + 1, size=n_long)])
    lengths = lengths[rng.permutation(n_docs)]
    return [rng.integers(RESERVED, vocab_size, size=int(L)).tolist() for L in lengths]


def gen_constant_length_corpus(n_docs: int = 64, length: int = 32, vocab_size: int = 64, seed: int = 0) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    return [rng.integers(RESERVED, vocab_size, size=length).tolist() for _ in range(n_docs)]


# --------------------------------------------------------------------------
# tokenizer fixtures

FIXTURE_TEXTS = {
    "de": [
        "Der schnelle braune Fuchs springt über den faulen Hund.",
        "Die Suche nach Dokumenten verwendet dichte Vektoren.",
        "Ein kleines Modell lernt schnell aus wenigen Beispielen.",
        "Die Stadt liegt am Ufer des großen Flusses.",
    ],
    "en": [
        "The quick brown fox jumps over the lazy dog.",
        "Dense retrieval ranks documents by embedding similarity.",
        "A small model learns quickly from a few examples.",
        "The city lies on the bank of the great river.",
    ],
    "es": [
        "El rápido zorro marrón salta sobre el perro perezoso.",
        "La búsqueda densa ordena documentos por similitud.",
        "Un modelo pequeño aprende rápido con pocos ejemplos.",
        "La ciudad está en la orilla del gran río.",
    ],
    "py": [
        "def search(index, query, k=10):",
        "    scores = index @ query",
        "    return sorted(range(len(scores)), key=lambda i: -scores[i])[:k]",
        "for doc_id, score in results: print(doc_id, score)",
    ],
}


def tiny_tokenizer(num_merges: int = 120) -> TokenizerSpec:
    """BPE trained on the built-in fixture texts."""
    return train_bpe([t for texts in FIXTURE_TEXTS.values() for t in texts], num_merges)
