import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embedkit import encoder as enc
from embedkit import retrieval as rv
from embedkit.fixtures import ClusterDatasetSpec, gen_cluster_dataset
from oracles import accuracy_oracle, ndcg_oracle, random_qrels_run, recall_oracle, search_oracle


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_index_validation(rng):
    with pytest.raises(ValueError):
        rv.IndexedCorpus(["a", "b"], unit_rows(rng, 3, 4))
    with pytest.raises(ValueError):
        rv.IndexedCorpus(["a", "a"], unit_rows(rng, 2, 4))
    with pytest.raises(ValueError):
        rv.IndexedCorpus(["a"], np.ones((1, 4)))


def test_search_self_first(rng):
    D = unit_rows(rng, 10, 6)
    run = rv.search(rv.IndexedCorpus([f"d{i}" for i in range(10)], D), D[[4]], 3)
    assert run["0"][0][0] == "d4"
    assert run["0"][0][1] == pytest.approx(1.0, abs=1e-12)


def test_search_full_ranking(rng):
    D = unit_rows(rng, 5, 3)
    run = rv.search(rv.IndexedCorpus(list("abcde"), D), unit_rows(rng, 2, 3), 50, ["x", "y"])
    assert all(len(v) == 5 for v in run.values())
    assert all(sorted(d for d, _ in v) == list("abcde") for v in run.values())


def test_search_ties_by_doc_id():
    D = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    run = rv.search(rv.IndexedCorpus(["z", "b", "c", "a"], D), np.array([[1.0, 0.0]]), 4)
    assert [d for d, _ in run["0"]] == ["a", "b", "z", "c"]


def test_search_errors(rng):
    idx = rv.IndexedCorpus(["a"], unit_rows(rng, 1, 3))
    with pytest.raises(ValueError):
        rv.search(idx, unit_rows(rng, 1, 4), 1)
    with pytest.raises(ValueError):
        rv.search(idx, unit_rows(rng, 1, 3), 0)


@given(st.integers(0, 2**31))
def test_search_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    D = np.round(unit_rows(rng, 50, 4), 1)  # coarse values create exact ties
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    ids = [f"doc{int(i):03d}" for i in rng.permutation(50)]
    Q = unit_rows(rng, 3, 4)
    run = rv.search(rv.IndexedCorpus(ids, D), Q, 10)
    assert [[d for d, _ in run[str(i)]] for i in range(3)] == search_oracle(ids, D, Q, 10)


def test_ndcg_examples():
    assert rv.ndcg_at_k({"q": [("a", 1.0)]}, {"q": {"a": 1}}, 10)[1] == 1.0
    val = rv.ndcg_at_k({"q": [("b", 2.0), ("a", 1.0)]}, {"q": {"a": 1}}, 10)[1]
    assert val == pytest.approx(0.6309297535714575, abs=1e-15)
    assert val == pytest.approx(1 / math.log2(3), abs=1e-15)


def test_ndcg_graded_linear_gain():
    per, mean = rv.ndcg_at_k({"q": [("b", 2.0), ("a", 1.0)]}, {"q": {"a": 3, "b": 1}}, 2)
    assert mean == pytest.approx((1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3)), abs=1e-15)


def test_missing_query_scores_zero():
    per, mean = rv.ndcg_at_k({}, {"q": {"a": 1}, "r": {"b": 1}}, 10)
    assert per == {"q": 0.0, "r": 0.0}


def test_zero_gain_query_excluded(caplog):
    qrels = {"q": {"a": 1}, "z": {"a": 0}}
    with caplog.at_level(logging.WARNING):
        per, mean = rv.ndcg_at_k({"q": [("a", 1.0)], "z": [("a", 1.0)]}, qrels, 10)
    assert per == {"q": 1.0} and mean == 1.0
    assert "z" in caplog.text


def test_accuracy_and_recall_examples():
    perfect = {"q": [("a", 1.0), ("b", 0.5)]}
    assert rv.accuracy_at_1(perfect, {"q": {"a": 1}}) == 1.0
    assert rv.recall_at_k(perfect, {"q": {"a": 1, "b": 1}}, 2) == 1.0
    wrong = {"q": [("x", 1.0), ("a", 0.5)], "r": [("y", 1.0), ("b", 0.5)]}
    qrels = {"q": {"a": 1}, "r": {"b": 1}}
    assert rv.accuracy_at_1(wrong, qrels) == 0.0
    assert rv.recall_at_k(wrong, qrels, 2) == 1.0


@given(st.integers(0, 2**31), st.integers(1, 12))
def test_metrics_match_oracles(seed, k):
    qrels, run = random_qrels_run(np.random.default_rng(seed))
    for v in (rv.ndcg_at_k(run, qrels, k)[1], rv.accuracy_at_1(run, qrels), rv.recall_at_k(run, qrels, k)):
        assert 0.0 <= v <= 1.0
    assert abs(rv.ndcg_at_k(run, qrels, k)[1] - ndcg_oracle(run, qrels, k)) <= 1e-9
    assert abs(rv.accuracy_at_1(run, qrels) - accuracy_oracle(run, qrels)) <= 1e-9
    assert abs(rv.recall_at_k(run, qrels, k) - recall_oracle(run, qrels, k)) <= 1e-9


@given(st.integers(0, 2**31))
def test_ndcg_invariant_under_monotone_transform(seed):
    qrels, run = random_qrels_run(np.random.default_rng(seed))
    warped = {q: [(d, math.exp(3 * s) - 7) for d, s in v] for q, v in run.items()}
    assert rv.ndcg_at_k(warped, qrels, 10) == rv.ndcg_at_k(run, qrels, 10)


def test_aggregate_published_rows():
    code = [60.6, 77.6, 56.2, 57.0, 77.2, 55.5, 86.9, 83.2, 34.4, 35.4, 86.6, 55.7]
    agg = rv.aggregate_benchmark({f"t{i}": s for i, s in enumerate(code)})
    assert abs(agg.mean - 63.9) <= 0.05 and agg.rounded == 63.9
    miracl = [67.93, 70.85, 58.35, 45.46, 68.47, 52.08, 50.97, 51.77, 46.93,
              62.52, 59.15, 52.39, 56.86, 51.01, 66.18, 80.38, 71.73, 63.57]
    agg = rv.aggregate_benchmark({f"l{i}": s for i, s in enumerate(miracl)}, decimals=2)
    assert abs(agg.mean - 59.81) <= 0.01 and agg.rounded == 59.81
    assert rv.aggregate_benchmark({"only": 42.25}) == (42.25, 42.2)
    with pytest.raises(ValueError):
        rv.aggregate_benchmark({})


def test_files_roundtrip(tmp_path):
    qrels, run = random_qrels_run(np.random.default_rng(0))
    rv.write_qrels(qrels, tmp_path / "q.txt")
    rv.write_run(run, tmp_path / "r.txt")
    assert rv.read_qrels(tmp_path / "q.txt") == qrels
    assert rv.read_run(tmp_path / "r.txt") == {q: v for q, v in run.items() if v}
    (tmp_path / "bad.txt").write_text("q1 0 d1\n")
    with pytest.raises(ValueError):
        rv.read_qrels(tmp_path / "bad.txt")


# --- model-level sweeps ---------------------------------------------------


@pytest.fixture(scope="module")
def small_model():
    ds = gen_cluster_dataset(ClusterDatasetSpec(clusters=4, docs_per_cluster=5, queries_per_cluster=2))
    cfg = enc.EncoderConfig(vocab_size=64, dim=8, heads=2, ffn_dim=16, layers=1, max_len=16, local_window=8)
    return enc.init_weights(cfg, 0), cfg, ds.eval


def test_mrl_sweep_full_dim_is_plain_eval(small_model):
    w, cfg, es = small_model
    rep = rv.mrl_sweep(w, cfg, es, [8])
    assert rep.means() == [rv.evaluate(w, cfg, es)]


def test_mrl_sweep_duplicate_and_manual(small_model):
    w, cfg, es = small_model
    rep = rv.mrl_sweep(w, cfg, {"t": es}, [8, 4, 4, 2])
    assert rep.rows[1] == rep.rows[2]
    qids, dids = sorted(es.queries), sorted(es.docs)
    Qe = enc.encode(w, cfg, [es.queries[q] for q in qids])
    De = enc.encode(w, cfg, [es.docs[d] for d in dids])
    for dim, m in zip([4, 2], rep.means()[2:]):
        q = Qe[:, :dim] / np.linalg.norm(Qe[:, :dim], axis=1, keepdims=True)
        d = De[:, :dim] / np.linalg.norm(De[:, :dim], axis=1, keepdims=True)
        run = rv.search(rv.IndexedCorpus(dids, d), q, 10, qids)
        assert m == pytest.approx(ndcg_oracle(run, es.qrels, 10), abs=1e-12)
    with pytest.raises(ValueError):
        rv.mrl_sweep(w, cfg, es, [4, 8, 2])
    with pytest.raises(ValueError):
        rv.mrl_sweep(w, cfg, es, [16])


def test_context_sweep_long_msl_is_untruncated(small_model):
    w, cfg, es = small_model
    longest = max(len(d) for d in es.docs.values()) + cfg.special_len
    rep = rv.context_sweep(w, cfg, es, [longest, cfg.max_len])
    assert rep.means() == [rv.evaluate(w, cfg, es)] * 2
    assert rep.axis == "max_seq_len" and rep.values() == [longest, 16]
    with pytest.raises(ValueError):
        rv.context_sweep(w, cfg, es, [8, 16, 12])
    with pytest.raises(ValueError):
        rv.context_sweep(w, cfg, es, [32])


def test_truncate_embeddings(rng):
    E = unit_rows(rng, 3, 4)
    assert rv.truncate_embeddings(E, 4) is E
    np.testing.assert_allclose(np.linalg.norm(rv.truncate_embeddings(E, 2), axis=1), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        rv.truncate_embeddings(E, 0)


def test_eval_set_io(tmp_path, small_model):
    _, _, es = small_model
    rv.save_eval_set(es, tmp_path / "e.json")
    back = rv.load_eval_set(tmp_path / "e.json")
    assert (back.queries, back.docs, back.qrels) == (es.queries, es.docs, es.qrels)
    with pytest.raises(ValueError):
        rv.EvalSet({"q": [1]}, {}, {"q": {"ghost": 1}})


def test_sweep_csv(tmp_path, small_model):
    w, cfg, es = small_model
    rv.write_sweep_csv(rv.mrl_sweep(w, cfg, {"b": es, "a": es}, [8, 4]), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "dimension,a,b,mean" and len(lines) == 3
