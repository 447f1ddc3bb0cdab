"""
Nested-dimension training on the cluster fixture
================================================

Train the same toy encoder twice, once with a ladder of prefix losses and
once with the full-width loss only, then compare NDCG@10 after truncating
embeddings to 16, 8 and 4 dimensions.
"""

# %%
import numpy as np

from embedkit import encoder as enc, fixtures as fx, retrieval as rv
from embedkit.losses import ContrastiveParams, MRLParams
from embedkit.trainer import TrainConfig, train_contrastive

ds = fx.gen_cluster_dataset(fx.ClusterDatasetSpec(noise_rate=0.1, seed=1))
cfg = enc.EncoderConfig(vocab_size=64, dim=32, layers=2, heads=4, pooling="cls")
w0 = enc.init_weights(cfg, 3)
tc = TrainConfig(learning_rate=1e-2, batch_size=16, steps=300)
dims = [32, 16, 8, 4]

# %%
nested, trace = train_contrastive(w0, cfg, ds.train, tc, ContrastiveParams(), MRLParams(tuple(dims)))
full, _ = train_contrastive(w0, cfg, ds.train, tc, ContrastiveParams())
print(f"nested loss {trace.losses[0]:.2f} -> {np.mean(trace.losses[-10:]):.2f}")

# %%
# Prefixes are renormalized before scoring, so only the direction matters.
for name, w in (("nested", nested), ("full only", full)):
    scores = rv.mrl_sweep(w, cfg, ds.eval, dims, k=10).means()
    print(f"{name:>10}: " + "  ".join(f"d={d}: {s:.3f}" for d, s in zip(dims, scores)))
