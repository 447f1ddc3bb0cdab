"""
Stretching the context window
=============================

A model trained on 64-token haystacks cannot see needles planted past
position 64. Continuing training with a larger RoPE base and 256-token
haystacks makes them reachable.
"""

# %%
from embedkit import encoder as enc, fixtures as fx, retrieval as rv
from embedkit.losses import ContrastiveParams
from embedkit.trainer import EXTENDED_ROPE_THETA, TrainConfig, train_context_extension, train_contrastive

cfg = enc.EncoderConfig(vocab_size=64, dim=32, layers=2, heads=4, pooling="mean", max_len=64)
short = fx.gen_needle_dataset(fx.random_needle_spec(256, 64, seed=11)).training_examples()
long_ = fx.gen_needle_dataset(fx.random_needle_spec(256, 256, seed=12)).training_examples()
late = fx.gen_needle_dataset(fx.random_needle_spec(32, 256, seed=13, lo=64)).eval_set()
params = ContrastiveParams(tau=0.05, beta=0.0, gamma=0.0)

# %%
base, _ = train_contrastive(enc.init_weights(cfg, 5), cfg, short,
                            TrainConfig(learning_rate=1e-2, steps=200, max_seq_len=64), params)
print("base model, msl 64:", rv.context_sweep(base, cfg, late, [64], metric="accuracy").means())

# %%
ext_cfg = enc.rope_rescale(cfg, EXTENDED_ROPE_THETA, 256)
ext, trace = train_context_extension(
    base, ext_cfg, long_,
    TrainConfig(learning_rate=8e-4, batch_size=8, steps=200, max_seq_len=256, stage="context_extension"), params)
sweep = rv.context_sweep(ext, ext_cfg, late, [64, 128, 256], metric="accuracy")
for msl, acc in zip(sweep.values(), sweep.means()):
    print(f"extended model, msl {msl:3d}: Accuracy@1 {acc:.3f}")
