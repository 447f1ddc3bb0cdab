"""Deterministic desk-scale training loops for the toy encoder.

Three stages share one loop: contrastive fine-tuning (optionally with a
Matryoshka ladder), knowledge distillation with a teacher chosen per batch by
language, and context-extension continuation after ``rope_rescale``.
Batches are language-homogeneous; the batch order for every epoch is derived
from the seed, so a run is bitwise reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import encoder as enc
from .losses import (
    ContrastiveParams,
    EmbeddingBatch,
    KDParams,
    MRLParams,
    contrastive_loss,
    expand_in_batch_negatives,
    fold_in_batch_gradient,
    kd_loss,
    mrl_loss,
)

STAGES = ("contrastive_ft", "contrastive_kd", "context_extension")


@dataclass
class TrainingExample:
    query: list[int]
    positive: list[int]
    negatives: list[list[int]] = field(default_factory=list)
    language: str = "en"
    id: str = ""

    def __post_init__(self):
        if not self.positive:
            raise ValueError("a training example needs a positive passage")
        if not self.language:
            raise ValueError("language tag must be non-empty")

    @property
    def passages(self) -> list[list[int]]:
        return [self.positive, *self.negatives]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 200
    seed: int = 0
    max_seq_len: int = 64
    stage: str = "contrastive_ft"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_seq_len < 1:
            raise ValueError("batch_size and max_seq_len must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


# Desk-scale presets: the learning-rate ratios between stages (1 : 0.8 : 0.08)
# and the 16x RoPE base increase follow the production schedule.
PRESETS = {
    "contrastive_ft": TrainConfig(learning_rate=1e-2, batch_size=32, steps=200, max_seq_len=64,
                                  stage="contrastive_ft"),
    "contrastive_kd": TrainConfig(learning_rate=8e-3, batch_size=8, steps=300, max_seq_len=64,
                                  stage="contrastive_kd"),
    "context_extension": TrainConfig(learning_rate=8e-4, batch_size=8, steps=200, max_seq_len=256,
                                     stage="context_extension"),
}
EXTENDED_ROPE_THETA = 160000.0


@dataclass
class BatchPlan:
    language: str
    indices: list[int]


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    languages: list[str] = field(default_factory=list)
    teachers: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step", "loss"] + (["language", "teacher"] if self.teachers else [])
            w.writerow(header)
            for step, loss in enumerate(self.losses):
                row = [step, repr(loss)]
                if self.teachers:
                    row += [self.languages[step], self.teachers[step]]
                w.writerow(row)


# --------------------------------------------------------------------------
# batching


def build_batches(examples: Sequence[TrainingExample], batch_size: int, seed: int = 0) -> list[BatchPlan]:
    """Language-homogeneous batches in a seed-determined order.

    Examples are shuffled within each language and chunked; trailing
    partial batches are kept. The batch order is shuffled as well.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not examples:
        raise ValueError("no training examples")
    rng = np.random.default_rng(seed)
    by_lang: dict[str, list[int]] = {}
    for i, ex in enumerate(examples):
        by_lang.setdefault(ex.language, []).append(i)
    plans = []
    for lang in sorted(by_lang):
        idx = [by_lang[lang][j] for j in rng.permutation(len(by_lang[lang]))]
        plans.extend(BatchPlan(lang, idx[k : k + batch_size]) for k in range(0, len(idx), batch_size))
    return [plans[j] for j in rng.permutation(len(plans))]


def _batch_stream(examples, batch_size, seed):
    epoch = 0
    while True:
        yield from build_batches(examples, batch_size, seed=seed * 100003 + epoch)
        epoch += 1


# --------------------------------------------------------------------------
# optimizer


def adamw_step(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict | None,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
    """One AdamW update; returns new ``(weights, state)`` without touching the inputs."""
    b1, b2 = betas
    state = state or {}
    t = state.get("step", 0) + 1
    m_prev = state.get("m", {})
    v_prev = state.get("v", {})
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        m = b1 * m_prev.get(name, 0.0) + (1 - b1) * g
        v = b2 * v_prev.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_w[name] = w - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * w)
        new_m[name], new_v[name] = m, v
    return new_w, {"step": t, "m": new_m, "v": new_v}


def _add_grads(a, b):
    return {k: a[k] + b[k] for k in a}


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


# --------------------------------------------------------------------------
# contrastive stages


def _check_lengths(examples, config: enc.EncoderConfig, tconfig: TrainConfig):
    if tconfig.max_seq_len > config.max_len:
        raise ValueError(f"max_seq_len {tconfig.max_seq_len} exceeds encoder max_len {config.max_len}")
    limit = tconfig.max_seq_len - config.special_len
    for ex in examples:
        for seq in (ex.query, *ex.passages):
            if len(seq) > limit:
                raise ValueError(f"example {ex.id or '?'} has a sequence of length {len(seq)} > {limit}")


def _contrastive_step(weights, config, batch_examples, cparams, mrl):
    n = len(batch_examples)
    m = min(len(ex.passages) for ex in batch_examples)
    queries = [ex.query for ex in batch_examples]
    passages = [p for ex in batch_examples for p in ex.passages[:m]]
    Qe, qcache = enc.forward(weights, config, queries)
    Pe, pcache = enc.forward(weights, config, passages)
    batch = EmbeddingBatch(Qe, Pe.reshape(n, m, -1))
    if n >= 2:
        batch = expand_in_batch_negatives(batch)
    if mrl is not None:
        loss, gq, gp = mrl_loss(batch, cparams, mrl)
    else:
        loss, gq, gp = contrastive_loss(batch, cparams)
    if n >= 2:
        gp = fold_in_batch_gradient(gp, m)
    grads = _add_grads(enc.backward(weights, config, qcache, gq),
                       enc.backward(weights, config, pcache, gp.reshape(n * m, -1)))
    return loss, grads


def _run_loop(weights, examples, tconfig, step_fn):
    weights = {k: np.array(v, dtype=np.float64, copy=True) for k, v in weights.items()}
    trace = TrainTrace()
    if tconfig.steps == 0:
        return weights, trace
    state = None
    stream = _batch_stream(examples, tconfig.batch_size, tconfig.seed)
    for _ in range(tconfig.steps):
        plan = next(stream)
        loss, grads, teacher = step_fn(weights, plan)
        trace.losses.append(float(loss))
        trace.grad_norms.append(_global_norm(grads))
        trace.languages.append(plan.language)
        if teacher is not None:
            trace.teachers.append(teacher)
        weights, state = adamw_step(weights, grads, state, tconfig.learning_rate, tconfig.betas,
                                    tconfig.eps, tconfig.weight_decay)
    return weights, trace


def train_contrastive(weights, config: enc.EncoderConfig, data: Sequence[TrainingExample], tconfig: TrainConfig,
                      cparams: ContrastiveParams = ContrastiveParams(), mrl: MRLParams | None = None):
    """Contrastive fine-tuning with in-batch negatives.

    Returns ``(weights, trace)``; the input weights are not modified.
    """
    data = list(data)
    enc.check_weights(weights, config)
    _check_lengths(data, config, tconfig)

    def step(w, plan):
        loss, grads = _contrastive_step(w, config, [data[i] for i in plan.indices], cparams, mrl)
        return loss, grads, None

    return _run_loop(weights, data, tconfig, step)


def train_context_extension(weights, config: enc.EncoderConfig, data_long: Sequence[TrainingExample],
                            tconfig: TrainConfig, cparams: ContrastiveParams = ContrastiveParams(),
                            mrl: MRLParams | None = None):
    """Continue contrastive training at an extended length.

    ``config`` should already carry the enlarged ``max_len``/``rope_theta``
    (see ``rope_rescale``).
    """
    if tconfig.stage != "context_extension":
        raise ValueError(f"train_context_extension needs stage 'context_extension', got {tconfig.stage!r}")
    return train_contrastive(weights, config, data_long, tconfig, cparams, mrl)


# --------------------------------------------------------------------------
# distillation


class TeacherScorer(Protocol):
    name: str

    def score(self, example: TrainingExample) -> np.ndarray:
        """One finite logit per passage of ``example`` (positive first)."""


class EncoderTeacher:
    """Teacher backed by a toy encoder; logits are scaled cosines."""

    def __init__(self, weights, config: enc.EncoderConfig, tau: float = 0.02, name: str = "encoder"):
        self.weights, self.config, self.tau, self.name = weights, config, tau, name
        self.calls: list[tuple[str, str]] = []

    def score(self, example: TrainingExample) -> np.ndarray:
        self.calls.append((example.id, example.language))
        q = enc.encode(self.weights, self.config, [example.query])
        p = enc.encode(self.weights, self.config, example.passages)
        return (p @ q[0]) / self.tau


class FileTeacher:
    """Teacher backed by precomputed logit rows keyed by example id.

    The file holds one JSON object per line: ``{"id": ..., "scores": [...]}``.
    """

    def __init__(self, scores: Mapping[str, Sequence[float]] | str | Path, name: str | None = None):
        if isinstance(scores, (str, Path)):
            path = Path(scores)
            self.name = name or path.stem
            self.scores = {}
            with open(path) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self.scores[str(rec["id"])] = np.asarray(rec["scores"], dtype=np.float64)
        else:
            self.name = name or "file"
            self.scores = {str(k): np.asarray(v, dtype=np.float64) for k, v in scores.items()}
        self.calls: list[tuple[str, str]] = []

    def score(self, example: TrainingExample) -> np.ndarray:
        self.calls.append((example.id, example.language))
        try:
            row = self.scores[example.id]
        except KeyError:
            raise KeyError(f"teacher {self.name!r} has no scores for example {example.id!r}") from None
        if row.shape != (len(example.passages),) or not np.all(np.isfinite(row)):
            raise ValueError(f"teacher {self.name!r}: bad score row for example {example.id!r}")
        return row

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for k in sorted(self.scores):
                fh.write(json.dumps({"id": k, "scores": self.scores[k].tolist()}) + "\n")


def resolve_teacher(teachers: Mapping[str, TeacherScorer], language: str,
                    default: TeacherScorer | None = None) -> TeacherScorer:
    teacher = teachers.get(language, default)
    if teacher is None:
        raise KeyError(f"no teacher for language {language!r} and no default teacher")
    return teacher


def student_logits(Qe: np.ndarray, Pe: np.ndarray, tau: float) -> np.ndarray:
    """Scaled cosines ``[n, m]`` between unit query rows and passage rows ``[n, m, d]``."""
    return np.einsum("id,ijd->ij", Qe, Pe) / tau


def train_distill(weights, config: enc.EncoderConfig, teachers: Mapping[str, TeacherScorer],
                  data: Sequence[TrainingExample], tconfig: TrainConfig, kdparams: KDParams = KDParams(),
                  tau: float = 0.02, default_teacher: TeacherScorer | None = None):
    """Distill teacher score distributions into the student, routed by batch language."""
    data = list(data)
    enc.check_weights(weights, config)
    _check_lengths(data, config, tconfig)
    for lang in sorted({ex.language for ex in data}):
        resolve_teacher(teachers, lang, default_teacher)

    def step(w, plan):
        batch = [data[i] for i in plan.indices]
        teacher = resolve_teacher(teachers, plan.language, default_teacher)
        m = min(len(ex.passages) for ex in batch)
        t_logits = np.stack([teacher.score(ex)[:m] for ex in batch])
        Qe, qcache = enc.forward(w, config, [ex.query for ex in batch])
        Pe, pcache = enc.forward(w, config, [p for ex in batch for p in ex.passages[:m]])
        n = len(batch)
        Pe = Pe.reshape(n, m, -1)
        loss, g = kd_loss(student_logits(Qe, Pe, tau), t_logits, kdparams)
        gq = np.einsum("ij,ijd->id", g, Pe) / tau
        gp = g[:, :, None] * Qe[:, None, :] / tau
        grads = _add_grads(enc.backward(w, config, qcache, gq),
                           enc.backward(w, config, pcache, gp.reshape(n * m, -1)))
        return loss, grads, teacher.name

    return _run_loop(weights, data, tconfig, step)


# --------------------------------------------------------------------------
# files


def example_from_record(rec: dict, index: int, tokenizer=None) -> TrainingExample:
    def toks(x):
        if isinstance(x, str):
            if tokenizer is None:
                raise ValueError("text fields need a tokenizer")
            from .vocab import tokenize

            return tokenize(tokenizer, x)
        return [int(t) for t in x]

    for key in ("query", "positive", "language"):
        if key not in rec:
            raise ValueError(f"record {index}: missing field {key!r}")
    return TrainingExample(query=toks(rec["query"]), positive=toks(rec["positive"]),
                           negatives=[toks(n) for n in rec.get("negatives", [])],
                           language=str(rec["language"]), id=str(rec.get("id", index)))


def read_examples(path, tokenizer=None) -> list[TrainingExample]:
    """Line-delimited JSON records with query, positive, negatives, language."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(example_from_record(json.loads(line), len(out), tokenizer))
    return out


def write_examples(examples: Sequence[TrainingExample], path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(dataclasses.asdict(ex)) + "\n")
