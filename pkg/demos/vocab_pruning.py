"""
Shrinking a tokenizer
=====================

Drop the least used merged tokens, see how much longer the token sequences
get, and carry an embedding matrix over to the smaller vocabulary.
"""

# %%
import numpy as np

from embedkit import fixtures as fx, vocab as vc

tok = fx.tiny_tokenizer(120)
texts = [t for ts in fx.FIXTURE_TEXTS.values() for t in ts]
print("vocab size:", len(tok))

# %%
freq = vc.count_frequencies(tok, texts)
small, old_to_new = vc.prune_vocab(tok, freq, len(tok) - 60)
before, after = vc.fertility(tok, fx.FIXTURE_TEXTS), vc.fertility(small, fx.FIXTURE_TEXTS)
for b, a in zip(before.rows, after.rows):
    print(f"{b.language}: {b.fertility:.2f} -> {a.fertility:.2f} tokens/word")

# %%
# Shared rows are copied; tokens the source never had get the mean row.
E = np.random.default_rng(0).standard_normal((len(tok), 16))
E_small = vc.transfer_embeddings(tok, E, small)
old = next(iter(old_to_new))
assert np.array_equal(E_small[old_to_new[old]], E[old])
print("transferred matrix:", E_small.shape)
