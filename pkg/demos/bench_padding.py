"""
Padding cost of naive batching
==============================

Mostly short documents with a few long ones: batching in random order pads
every short document up to the longest one in its batch. Sorting by length
first removes most of that waste.
"""

# %%
from embedkit import bench as bn, encoder as enc, fixtures as fx

cfg = enc.EncoderConfig(vocab_size=64, dim=32, layers=2, heads=4, max_len=128, pooling="mean")
weights = enc.init_weights(cfg, 0)
corpus = fx.gen_length_skewed_corpus(512, seed=0)

# %%
reports = {s: bn.run_throughput(weights, cfg, corpus, bn.BenchConfig(batch_size=32, msl=128, strategy=s,
                                                                     measured_batches=3))
           for s in bn.STRATEGIES}
for s, r in reports.items():
    print(f"{s:>13}: {r.docs_per_second:8.1f} docs/s, real {r.real_tokens}, padding {r.padding_tokens}")

# %%
print("sorted vs padded:", bn.relative_speed(reports["sorted_packed"], reports["padded"]), "%")
bn.write_report_csv([(s, weights, cfg, r) for s, r in reports.items()], "bench.csv", reference="padded")
