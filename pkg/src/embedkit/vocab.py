"""Byte-level BPE tokenizers: fertility, frequency pruning, embedding transfer.

Token strings use the printable byte alphabet of GPT-2 style tokenizers
(each byte maps to one unicode character, e.g. space -> ``"Ġ"``). Ids are
laid out as specials, then the 256 byte tokens, then merged tokens. Text is
pre-split into chunks of ``optional leading whitespace + non-space run``
(trailing whitespace forms its own chunk) and merges are applied inside
each chunk, lowest rule index first.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_SPECIALS = ("[CLS]", "[EOS]", "[PAD]", "[UNK]")
_CHUNK_RE = re.compile(r"\s*\S+|\s+")


@lru_cache(maxsize=None)
def byte_alphabet() -> tuple[str, ...]:
    """Printable stand-in character for each byte value 0..255."""
    printable = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    table = {}
    extra = 0
    for b in range(256):
        if b in printable:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + extra)
            extra += 1
    return tuple(table[b] for b in range(256))


def _symbols(chunk: str) -> list[str]:
    alpha = byte_alphabet()
    return [alpha[b] for b in chunk.encode("utf-8")]


def pretokenize(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


class TokenizerSpec:
    """Vocabulary, ordered merge rules and reserved specials. Immutable."""

    def __init__(self, vocab: Mapping[str, int], merges: Sequence[tuple[str, str]],
                 specials: Sequence[str] = DEFAULT_SPECIALS, byte_level: bool = True):
        if not byte_level:
            raise ValueError("only byte-level tokenizers are supported")
        self.vocab = dict(vocab)
        self.merges = [tuple(m) for m in merges]
        self.specials = list(specials)
        self.byte_level = True
        ids = sorted(self.vocab.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocab ids must be contiguous from 0")
        missing = [s for s in self.specials if s not in self.vocab]
        if missing:
            raise ValueError(f"specials missing from vocab: {missing}")
        if any(b not in self.vocab for b in byte_alphabet()):
            raise ValueError("vocab must contain all 256 byte tokens")
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        # a rule only fires if its product is still in the vocab
        self._ranks = {m: r for r, m in enumerate(self.merges) if m[0] + m[1] in self.vocab}
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenizerSpec) and self.vocab == other.vocab
                and self.merges == other.merges and self.specials == other.specials)

    @property
    def protected_ids(self) -> set[int]:
        return {self.vocab[t] for t in (*self.specials, *byte_alphabet())}

    def _bpe(self, chunk: str) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        syms = _symbols(chunk)
        while len(syms) > 1:
            best = None
            for pair in zip(syms, syms[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            a, b = best[1]
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        ids = tuple(self.vocab[s] for s in syms)
        self._cache[chunk] = ids
        return ids

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "merges": [list(m) for m in self.merges],
                "specials": self.specials, "byte_level": True}

    @classmethod
    def from_dict(cls, doc: dict) -> "TokenizerSpec":
        return cls(doc["vocab"], [tuple(m) for m in doc["merges"]],
                   doc.get("specials", DEFAULT_SPECIALS), doc.get("byte_level", True))


def base_vocab(specials: Sequence[str] = DEFAULT_SPECIALS) -> dict[str, int]:
    vocab = {s: i for i, s in enumerate(specials)}
    for b in byte_alphabet():
        vocab[b] = len(vocab)
    return vocab


def spec_from_merges(merges: Sequence[tuple[str, str]], specials: Sequence[str] = DEFAULT_SPECIALS) -> TokenizerSpec:
    """Build a spec whose vocabulary is the byte floor plus each merge product."""
    vocab = base_vocab(specials)
    for a, b in merges:
        vocab.setdefault(a + b, len(vocab))
    return TokenizerSpec(vocab, merges, specials)


def to_symbols(text: str) -> str:
    """Byte-alphabet spelling of ``text`` (handy for writing merge rules)."""
    return "".join(_symbols(text))


def train_bpe(texts: Iterable[str], num_merges: int, specials: Sequence[str] = DEFAULT_SPECIALS) -> TokenizerSpec:
    """Greedy pair-merge training; ties go to the lexicographically smallest pair."""
    words = Counter(chunk for t in texts for chunk in pretokenize(t))
    seqs = {w: _symbols(w) for w in words}
    merges = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for w, n in words.items():
            s = seqs[w]
            for pair in zip(s, s[1:]):
                pairs[pair] += n
        if not pairs:
            break
        top = max(pairs.values())
        a, b = min(p for p, c in pairs.items() if c == top)
        merges.append((a, b))
        for w in words:
            s, out, i = seqs[w], [], 0
            while i < len(s):
                if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            seqs[w] = out
    return spec_from_merges(merges, specials)


def tokenize(spec: TokenizerSpec, text: str) -> list[int]:
    """Token ids for ``text``; every byte sequence is encodable."""
    out: list[int] = []
    for chunk in pretokenize(text):
        out.extend(spec._bpe(chunk))
    return out


def save_tokenizer(spec: TokenizerSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")


def load_tokenizer(path) -> TokenizerSpec:
    return TokenizerSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# fertility


@dataclass(frozen=True)
class FertilityRow:
    language: str
    token_count: int
    word_count: int

    @property
    def fertility(self) -> float:
        return self.token_count / self.word_count


def average_fertility(values: Iterable[float]) -> float:
    """Unweighted mean over languages (the Avg. column)."""
    values = list(values)
    if not values:
        raise ValueError("no fertility values")
    return math.fsum(values) / len(values)


@dataclass
class FertilityReport:
    rows: list[FertilityRow]

    @property
    def average(self) -> float:
        return average_fertility(r.fertility for r in self.rows)

    def as_dict(self) -> dict[str, float]:
        return {r.language: r.fertility for r in self.rows}

    def write_csv(self, path, tokenizer_name: str = "tokenizer", decimals: int = 2) -> None:
        """One row per tokenizer: language columns then ``Avg.``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Tokenizer", *(r.language for r in self.rows), "Avg."])
            w.writerow([tokenizer_name, *(f"{r.fertility:.{decimals}f}" for r in self.rows),
                        f"{self.average:.{decimals}f}"])


def count_words(text: str, segmenter: str = "whitespace") -> int:
    if segmenter == "whitespace":
        return len(text.split())
    if segmenter == "per_char":
        return sum(1 for ch in text if not ch.isspace())
    raise ValueError(f"unknown segmenter {segmenter!r}")


def fertility(spec: TokenizerSpec, corpus: Mapping[str, Sequence[str]], segmenter: str = "whitespace") -> FertilityReport:
    """Tokens per word for each language, rows sorted by language tag."""
    rows = []
    for lang in sorted(corpus):
        texts = corpus[lang]
        if not texts:
            raise ValueError(f"language {lang!r} has no texts")
        words = sum(count_words(t, segmenter) for t in texts)
        if words == 0:
            raise ValueError(f"language {lang!r} has zero words")
        tokens = sum(len(tokenize(spec, t)) for t in texts)
        rows.append(FertilityRow(lang, tokens, words))
    return FertilityReport(rows)


# --------------------------------------------------------------------------
# pruning and embedding transfer


def count_frequencies(spec: TokenizerSpec, texts: Iterable[str]) -> dict[int, int]:
    """Occurrence count of every id over ``texts`` (zeros included)."""
    counts = Counter()
    for t in texts:
        counts.update(tokenize(spec, t))
    return {i: counts.get(i, 0) for i in range(len(spec))}


def prune_vocab(spec: TokenizerSpec, freq: Mapping[int, int], target_size: int):
    """Drop the least frequent unprotected tokens until ``target_size`` remain.

    Ids absent from ``freq`` count as zero. Ties remove the higher id first.
    Byte tokens and specials always survive; merge rules touching a removed
    token are dropped. Surviving ids are renumbered in their original order.

    Returns:
        ``(pruned_spec, old_to_new)`` where ``old_to_new`` maps every
        surviving old id to its new id.
    """
    floor = 256 + len(spec.specials)
    if target_size < floor:
        raise ValueError(f"target_size {target_size} below the byte+special floor {floor}")
    if target_size > len(spec):
        raise ValueError(f"target_size {target_size} exceeds vocab size {len(spec)}")
    unknown = [i for i in freq if not 0 <= int(i) < len(spec)]
    if unknown:
        raise ValueError(f"frequency table has ids outside the vocab: {sorted(unknown)[:5]}")
    protected = spec.protected_ids
    candidates = [i for i in range(len(spec)) if i not in protected]
    candidates.sort(key=lambda i: (freq.get(i, 0), -i))
    removed = set(candidates[: len(spec) - target_size])
    removed_tokens = {spec.id_to_token[i] for i in removed}
    keep = [i for i in range(len(spec)) if i not in removed]
    old_to_new = {old: new for new, old in enumerate(keep)}
    vocab = {spec.id_to_token[old]: new for old, new in old_to_new.items()}
    merges = [m for m in spec.merges
              if m[0] not in removed_tokens and m[1] not in removed_tokens and m[0] + m[1] not in removed_tokens]
    return TokenizerSpec(vocab, merges, spec.specials), old_to_new


def _as_vocab(v) -> dict[str, int]:
    return v.vocab if isinstance(v, TokenizerSpec) else dict(v)


def transfer_embeddings(source_vocab, source_matrix, target_vocab) -> np.ndarray:
    """Embedding matrix for ``target_vocab`` initialized from a source model.

    Shared tokens copy their source row exactly; new tokens all receive the
    mean of every source row.
    """
    src = _as_vocab(source_vocab)
    tgt = _as_vocab(target_vocab)
    M = np.asarray(source_matrix)
    if not src:
        raise ValueError("empty source vocabulary")
    if M.ndim != 2 or M.shape[0] != len(src) or M.shape[1] < 1:
        raise ValueError(f"source matrix shape {M.shape} does not match vocab size {len(src)}")
    mean_row = M.mean(axis=0)
    out = np.empty((len(tgt), M.shape[1]), dtype=M.dtype)
    for tok, i in tgt.items():
        j = src.get(tok)
        out[i] = M[j] if j is not None else mean_row
    return out
