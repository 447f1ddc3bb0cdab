"""
Distilling from per-language teachers
=====================================

Teacher scores are dumped to one JSONL file per language. The student is
trained against them and every teacher lookup is logged, so we can check
that English batches never reached the German teacher and vice versa.
"""

# %%
import numpy as np

from embedkit import encoder as enc, fixtures as fx
from embedkit.losses import KDParams
from embedkit.trainer import EncoderTeacher, FileTeacher, TrainConfig, train_distill

langs = ("en", "de")
ds = fx.gen_cluster_dataset(fx.ClusterDatasetSpec(negatives=3, languages=langs, seed=2))
held = fx.gen_cluster_dataset(fx.ClusterDatasetSpec(examples_per_cluster=8, negatives=3, languages=langs, seed=3))

# A bag-of-tokens model that knows the cluster of every token acts as teacher.
tcfg = enc.EncoderConfig(vocab_size=64, dim=8, layers=0)
oracle = EncoderTeacher({"token_embedding": fx.oracle_token_embeddings(ds, 8)
                         + 1e-3 * np.random.default_rng(0).standard_normal((64, 8)),
                         "projection": np.eye(8)}, tcfg, tau=0.05)
teachers = {lang: FileTeacher({ex.id: oracle.score(ex) for ex in ds.train if ex.language == lang},
                              name=f"teacher-{lang}") for lang in langs}

# %%
scfg = enc.EncoderConfig(vocab_size=64, dim=32, layers=2, heads=4, pooling="mean")
w0 = enc.init_weights(scfg, 4)


def agreement(w):
    hits = [np.argmax(enc.encode(w, scfg, ex.passages) @ enc.encode(w, scfg, [ex.query])[0])
            == np.argmax(oracle.score(ex)) for ex in held.train]
    return np.mean(hits)


w, trace = train_distill(w0, scfg, teachers, ds.train,
                         TrainConfig(learning_rate=8e-3, batch_size=8, steps=300, stage="contrastive_kd"),
                         KDParams(tau_kd=1.0))
print(f"top-1 agreement with teacher: {agreement(w0):.3f} -> {agreement(w):.3f}")

# %%
for lang, t in teachers.items():
    seen = sorted({l for _, l in t.calls})
    print(f"{t.name}: {len(t.calls)} lookups, languages seen {seen}")
