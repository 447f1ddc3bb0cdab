import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embedkit.gradcheck import contrastive_loss_oracle, kd_loss_oracle, mrl_loss_oracle
from embedkit.losses import (
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
from embedkit.numerics import NumericsError, row_softmax

seeds = st.integers(0, 2**32 - 1)


def random_batch(rng, n=3, m=2, d=4):
    return EmbeddingBatch(rng.standard_normal((n, d)), rng.standard_normal((n, m, d)))


# --- contrastive ----------------------------------------------------------


def test_single_pair_without_extra_terms_is_zero(rng):
    b = random_batch(rng, n=1, m=1)
    loss, gQ, gP = contrastive_loss(b, ContrastiveParams(tau=0.02, beta=0.0, gamma=0.0))
    assert loss == 0.0
    assert np.all(gQ == 0) and np.all(gP == 0)


def test_all_weights_zero_collapses(rng):
    loss, gQ, gP = contrastive_loss(random_batch(rng, 4, 3, 5), ContrastiveParams(alpha=0, beta=0, gamma=0))
    assert loss == 0.0
    assert not gQ.any() and not gP.any()


def test_fixed_small_batch_matches_oracle():
    Q = np.array([[1.0, 0.0], [0.6, 0.8]])
    P = np.array([[[0.8, 0.6], [0.0, 1.0]], [[1.0, 1.0], [-1.0, 0.5]]])
    loss, _, _ = contrastive_loss(EmbeddingBatch(Q, P), ContrastiveParams(tau=1.0))
    # 40-digit straight-line evaluation
    assert loss == pytest.approx(0.9709547378250102, abs=1e-14)
    assert loss == pytest.approx(contrastive_loss_oracle(Q, P, ContrastiveParams(tau=1.0)), abs=1e-14)


@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_contrastive_matches_oracle_and_nonnegative(seed, n, m, d):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, n, m, d)
    params = ContrastiveParams(tau=0.05, alpha=0.5, beta=1.5, gamma=0.7)
    loss, _, _ = contrastive_loss(b, params)
    assert loss >= 0
    assert loss == pytest.approx(contrastive_loss_oracle(b.Q, b.P, params), rel=1e-10, abs=1e-12)


def test_loss_decreases_as_positive_similarity_grows(rng):
    b = random_batch(rng, 2, 3, 4)
    losses = []
    for lam in np.linspace(0, 0.9, 6):
        P = b.P.copy()
        P[0, 0] = (1 - lam) * P[0, 0] + lam * b.Q[0] * np.linalg.norm(P[0, 0]) / np.linalg.norm(b.Q[0])
        losses.append(contrastive_loss(EmbeddingBatch(b.Q, P), ContrastiveParams(tau=0.1, beta=0, gamma=0))[0])
    assert np.all(np.diff(losses) < 0)


def test_zero_norm_embedding_raises(rng):
    b = random_batch(rng)
    Q = b.Q.copy()
    Q[1] = 0
    with pytest.raises(NumericsError):
        contrastive_loss(EmbeddingBatch(Q, b.P))


def test_params_validation():
    with pytest.raises(ValueError):
        ContrastiveParams(tau=0)
    with pytest.raises(ValueError):
        ContrastiveParams(alpha=-1)
    with pytest.raises(ValueError):
        KDParams(tau_kd=0)
    with pytest.raises(ValueError):
        KDParams(reduction="max")


def test_extreme_temperature_stays_finite(rng):
    loss, gQ, gP = contrastive_loss(random_batch(rng, 4, 4, 8), ContrastiveParams(tau=1e-3))
    assert np.isfinite(loss) and np.all(np.isfinite(gQ)) and np.all(np.isfinite(gP))


# --- in-batch negatives --------------------------------------------------


def test_expand_structure_n2_m1(rng):
    b = random_batch(rng, 2, 1, 3)
    e = expand_in_batch_negatives(b)
    assert e.m == 2
    np.testing.assert_array_equal(e.P[0, 1], b.P[1, 0])
    np.testing.assert_array_equal(e.P[1, 1], b.P[0, 0])


def test_expand_structure_n3_m2(rng):
    b = random_batch(rng, 3, 2, 3)
    e = expand_in_batch_negatives(b)
    assert e.m == 4
    for i in range(3):
        np.testing.assert_array_equal(e.P[i, :2], b.P[i])


@given(seeds, st.integers(2, 5), st.integers(1, 4))
def test_expand_matches_brute_force(seed, n, m):
    b = random_batch(np.random.default_rng(seed), n, m, 3)
    e = expand_in_batch_negatives(b)
    for i in range(n):
        want = {tuple(b.P[i, j]) for j in range(1, m)} | {tuple(b.P[k, 0]) for k in range(n) if k != i}
        assert {tuple(x) for x in e.P[i, 1:]} == want
        np.testing.assert_array_equal(e.P[i, 0], b.P[i, 0])


def test_expand_needs_two_queries(rng):
    with pytest.raises(ValueError):
        expand_in_batch_negatives(random_batch(rng, 1, 2))


def test_fold_gradient_is_adjoint_of_expand(rng):
    b = random_batch(rng, 3, 2, 4)
    G = rng.standard_normal((3, 4, 4))
    folded = fold_in_batch_gradient(G, 2)
    # <G, expand(P)> == <fold(G), P> for the linear map P -> expand(P)
    lhs = np.sum(G * expand_in_batch_negatives(b).P)
    assert lhs == pytest.approx(np.sum(folded * b.P), rel=1e-12)


# --- KD -------------------------------------------------------------------


def test_kd_uniform_rows():
    z = np.zeros((2, 4))
    loss, g = kd_loss(z, z, KDParams(1.0))
    assert loss == pytest.approx(2 * math.log(4), abs=1e-12)
    np.testing.assert_array_equal(g, 0.0)


def test_kd_hand_computation():
    loss, _ = kd_loss([[0.0, 0.0]], [[math.log(2), 0.0]], KDParams(1.0))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_kd_gradient_formula(rng):
    s, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    for tau in (0.5, 1.0, 2.0):
        _, g = kd_loss(s, t, KDParams(tau))
        np.testing.assert_allclose(g, (row_softmax(s, tau) - row_softmax(t, tau)) / tau, atol=1e-15)


def test_kd_mean_reduction(rng):
    s, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    total, g = kd_loss(s, t)
    mean, gm = kd_loss(s, t, KDParams(reduction="mean"))
    assert mean == pytest.approx(total / 3, rel=1e-14)
    np.testing.assert_allclose(gm, g / 3, rtol=1e-14)


def test_kd_errors():
    with pytest.raises(ValueError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        kd_loss(np.zeros((2, 1)), np.zeros((2, 1)))


@given(seeds, st.integers(1, 4), st.integers(2, 6), st.sampled_from([0.5, 1.0, 2.0]))
def test_kd_gibbs_bound_and_oracle(seed, n, m, tau):
    rng = np.random.default_rng(seed)
    s, t = 3 * rng.standard_normal((n, m)), 3 * rng.standard_normal((n, m))
    p = KDParams(tau)
    loss, _ = kd_loss(s, t, p)
    pt = row_softmax(t, tau)
    entropy = -np.sum(pt * np.log(pt))
    assert loss >= entropy - 1e-9
    assert kd_loss(t, t, p)[0] == pytest.approx(entropy, abs=1e-9)
    assert loss == pytest.approx(kd_loss_oracle(s, t, p), rel=1e-12, abs=1e-12)


# --- MRL ------------------------------------------------------------------


def test_mrl_single_rung_is_bitwise_contrastive(rng):
    b = random_batch(rng, 3, 3, 6)
    p = ContrastiveParams(tau=0.05)
    lc, gq, gp = contrastive_loss(b, p)
    lm, mq, mp = mrl_loss(b, p, MRLParams((6,), (1.0,)))
    assert lm == lc
    np.testing.assert_array_equal(mq, gq)
    np.testing.assert_array_equal(mp, gp)


def test_mrl_duplicate_rung(rng):
    b = random_batch(rng, 3, 3, 6)
    p = ContrastiveParams(tau=0.05)
    assert mrl_loss(b, p, MRLParams((6, 6), (1.0, 1.0)))[0] == pytest.approx(contrastive_loss(b, p)[0], rel=1e-15)


def test_mrl_matches_truncation_oracle():
    rng = np.random.default_rng(42)
    Q, P = rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4))
    cp, mp = ContrastiveParams(tau=0.1), MRLParams((4, 2))
    loss, _, _ = mrl_loss(EmbeddingBatch(Q, P), cp, mp)
    assert loss == pytest.approx(11.040635352598677, abs=1e-12)
    assert loss == pytest.approx(mrl_loss_oracle(Q, P, cp, mp), abs=1e-12)


def test_mrl_explicit_average(rng):
    b = random_batch(rng, 2, 3, 4)
    p = ContrastiveParams(tau=0.2)
    full = contrastive_loss(b, p)[0]
    half = contrastive_loss(EmbeddingBatch(b.Q[:, :2], b.P[..., :2]), p)[0]
    assert mrl_loss(b, p, MRLParams((4, 2)))[0] == pytest.approx((full + half) / 2, rel=1e-14)
    assert mrl_loss(b, p, MRLParams((4, 2), (3.0, 1.0)))[0] == pytest.approx((3 * full + half) / 4, rel=1e-14)


def test_mrl_errors(rng):
    b = random_batch(rng, 2, 2, 4)
    with pytest.raises(ValueError):
        mrl_loss(b, ContrastiveParams(), MRLParams((8, 4)))
    with pytest.raises(ValueError):
        mrl_loss(b, ContrastiveParams(), MRLParams((2,)))
    with pytest.raises(ValueError):
        MRLParams(())
    with pytest.raises(ValueError):
        MRLParams((2, 4))
    with pytest.raises(ValueError):
        MRLParams((4, 2), (1.0,))
