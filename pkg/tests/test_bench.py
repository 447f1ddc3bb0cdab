import csv

import numpy as np
import pytest

from embedkit import bench as bn
from embedkit import encoder as enc
from embedkit import fixtures as fx

CFG = enc.EncoderConfig(vocab_size=64, dim=16, layers=1, heads=2, ffn_dim=32, max_len=128, local_window=16,
                        pooling="mean")


@pytest.fixture(scope="module")
def weights():
    return enc.init_weights(CFG, 0)


def run(weights, corpus, **kw):
    return bn.run_throughput(weights, CFG, corpus, bn.BenchConfig(**{"batch_size": 8, "msl": 128,
                                                                      "warmup_batches": 1, **kw}))


def test_config_validation():
    with pytest.raises(ValueError):
        bn.BenchConfig(strategy="bucketed")
    with pytest.raises(ValueError):
        bn.BenchConfig(measured_batches=0)
    with pytest.raises(ValueError):
        bn.BenchConfig(batch_size=0)


def test_constant_length_strategies_agree(weights):
    corpus = fx.gen_constant_length_corpus(32, 20)
    a, b = run(weights, corpus), run(weights, corpus, strategy="sorted_packed")
    assert a.padding_tokens == b.padding_tokens == 0
    assert a.real_tokens == b.real_tokens == 32 * 20
    assert a.total_docs == b.total_docs == 32


def test_skewed_corpus_packing_removes_padding(weights):
    corpus = fx.gen_length_skewed_corpus(64, seed=2)
    a, b = run(weights, corpus), run(weights, corpus, strategy="sorted_packed")
    assert a.real_tokens == b.real_tokens == sum(len(d) for d in corpus)
    assert b.padding_tokens < a.padding_tokens
    assert sorted(i for g in b.batches for i in g) == list(range(64))


def test_counts_deterministic(weights):
    corpus = fx.gen_length_skewed_corpus(40, seed=3)
    a = run(weights, corpus, strategy="sorted_packed", seed=4)
    b = run(weights, corpus, strategy="sorted_packed", seed=4, measured_batches=2)
    assert (a.total_docs, a.batches, a.padding_tokens) == (b.total_docs, b.batches, b.padding_tokens)
    assert a.docs_per_second > 0 and a.wall_seconds > 0


def test_truncation_and_errors(weights):
    corpus = [[5] * 200]
    rep = run(weights, corpus, msl=50)
    assert rep.real_tokens == 50
    with pytest.raises(ValueError):
        run(weights, corpus, msl=129)
    with pytest.raises(ValueError):
        run(weights, [])


def test_batch_order_sorted():
    corpus = [[4] * L for L in (5, 1, 9, 3, 7, 2)]
    groups = bn.batch_order(corpus, bn.BenchConfig(batch_size=2, strategy="sorted_packed"), 100)
    lengths = [len(corpus[i]) for g in groups for i in g]
    assert lengths == sorted(lengths)
    capped = bn.batch_order(corpus, bn.BenchConfig(batch_size=2, strategy="sorted_packed"), 4)
    assert {len(corpus[i]) for i in capped[-1]} <= {5, 9, 7, 3}


@pytest.mark.parametrize("num,den,expected", [(2025, 1828, 110.8), (2604, 2534, 102.8), (1000, 1000, 100.0)])
def test_relative_speed(num, den, expected):
    assert bn.relative_speed(num, den) == expected


def test_relative_speed_reports():
    r = bn.ThroughputReport(123.0, 10, 1.0, "padded")
    assert bn.relative_speed(r, r) == 100.0
    with pytest.raises(ValueError):
        bn.relative_speed(r, 0)


@pytest.mark.parametrize("before,after,expected", [(3268, 2534, -22.5), (2960, 1828, -38.2), (500, 500, 0.0)])
def test_padding_delta(before, after, expected):
    assert bn.padding_delta(before, after) == expected


def test_padding_delta_zero_baseline():
    with pytest.raises(ValueError):
        bn.padding_delta(0, 10)


def test_count_parameters(weights):
    assert bn.count_parameters(weights) == sum(int(np.prod(s)) for s in enc.weight_shapes(CFG).values())


def test_report_csv(tmp_path, weights):
    fast = bn.ThroughputReport(2025.0, 10, 1.0, "sorted_packed", 100, 5)
    slow = bn.ThroughputReport(1828.0, 10, 1.0, "padded", 100, 50)
    bn.write_report_csv([("big", weights, CFG, slow), ("small", weights, CFG, fast)], tmp_path / "b.csv",
                        reference="big")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["Model", "Parameters", "Embedding Size", "Encoding Speed (Docs/s)", "Rel to big",
                       "Strategy", "Real Tokens", "Padding Tokens"]
    assert rows[1][4] == "100.0%" and rows[2][4] == "110.8%"
    assert rows[2][2] == "16" and rows[2][3] == "2025"
    with pytest.raises(ValueError):
        bn.write_report_csv([], tmp_path / "x.csv")
