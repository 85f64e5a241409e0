import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minima_atlas import samples as S
from minima_atlas.activation import ActivationKind, ActivationSpec
from minima_atlas.network import random_target


def distinct_weights(r, d, rng, gap=0.1, box=2.0):
    while True:
        W = rng.uniform(-box, box, size=(r, d))
        if S.min_weight_gap(W) >= gap:
            return W


def test_type1_examples():
    X = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    np.testing.assert_array_equal(S.type1_matrix(np.zeros((1, 2)), X), np.ones((5, 1)))
    M = S.type1_matrix(np.array([[0.3], [0.3]]), X[:, :1])
    np.testing.assert_array_equal(M[:, 0], M[:, 1])


def test_type1_hand_matrix():
    M = S.type1_matrix(np.array([[0.0], [1.0]]), np.array([[0.0], [np.log(2)]]))
    np.testing.assert_allclose(M, [[1, 1], [1, 2]], rtol=1e-15)
    assert np.linalg.det(M) == pytest.approx(1.0, rel=1e-14)


def test_type2_examples():
    M = S.type2_matrix(np.array([[0.7]]), np.array([[0.0]]))
    np.testing.assert_array_equal(M, [[1.0, 0.0]])
    rng = np.random.default_rng(1)
    W = distinct_weights(3, 2, rng)
    M = S.type2_matrix(W, rng.uniform(-1, 1, size=(4, 2)))
    assert M.shape == (4, 9)
    assert S.rank_report(M).numerical_rank <= 4


def test_type2_layout_matches_columnwise_oracle():
    rng = np.random.default_rng(2)
    W = rng.uniform(-1, 1, size=(2, 3))
    X = rng.uniform(-1, 1, size=(5, 3))
    M = S.type2_matrix(W, X)
    for i, k in itertools.product(range(5), range(2)):
        z = X[i] @ W[k]
        assert M[i, k] == pytest.approx(np.exp(z), rel=1e-14)
        np.testing.assert_allclose(M[i, 2 + 3 * k: 5 + 3 * k], np.exp(z) * X[i], rtol=1e-14)


def test_type1_true_on_three_by_three_determinant_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        W = distinct_weights(3, 2, rng, gap=0.3)
        X = rng.uniform(-1, 1, size=(3, 2))
        ok, rep = S.is_type1(W, X)
        M = S.type1_matrix(W, X)
        # brute-force cofactor expansion as an independent route
        det = sum((-1) ** j * M[0, j] * np.linalg.det(np.delete(M[1:], j, axis=1)) for j in range(3))
        assert abs(det) > 0
        assert ok == (rep.margin > 1e-8)


def test_duplicated_weight_drops_rank_by_one():
    rng = np.random.default_rng(4)
    W = distinct_weights(3, 1, rng)
    W[2] = W[0]
    ok, rep = S.is_type1(W, rng.uniform(-1, 1, size=(5, 1)))
    assert not ok and rep.numerical_rank == 2
    ok2, rep2 = S.is_type2(W, rng.uniform(-1, 1, size=(6, 1)))
    assert not ok2


def test_rank_checks_reject_bad_arguments():
    X = np.random.default_rng(5).uniform(-1, 1, size=(4, 1))
    with pytest.raises(ValueError):
        S.is_type1(np.array([[0.0], [1.0]]), X, tol=0.0)
    with pytest.raises(ValueError):
        S.is_type1(np.zeros((5, 1)), X)
    with pytest.raises(ValueError):
        S.is_type2(np.array([[0.0]]), X)  # n = 4 > (d+1) m = 2
    assert S.is_type2(np.array([[0.0]]), X, m=2)[1].rows == 4


def test_rank_report_fields():
    rep = S.rank_report(np.diag([1.0, 1e-3, 1e-12]))
    assert rep.numerical_rank == 2 and rep.margin == pytest.approx(1e-3)
    assert rep.to_dict()["singular_values"][0] == 1.0


def test_construct_type1_single_weight():
    for seed in range(20):
        w = np.random.default_rng(seed).uniform(-2, 2, size=(1, 3))
        ss = S.construct_type1(w, seed=seed)
        assert ss.n == 1
        assert abs(np.exp(ss.points[0] @ w[0])) >= 0.5


def test_construct_type1_certified():
    rng = np.random.default_rng(6)
    for seed in range(20):
        W = distinct_weights(3, 2, rng)
        ss = S.construct_type1(W, seed=seed)
        assert ss.n == 3 and S.is_type1(W, ss)[0]
        assert ss.provenance is S.Provenance.CONSTRUCTED_TYPE_I


@pytest.mark.parametrize("r,d", [(1, 1), (2, 2), (3, 1), (2, 3), (4, 2)])
def test_construct_type2_certified(r, d):
    rng = np.random.default_rng(7)
    for seed in range(10):
        W = distinct_weights(r, d, rng, gap=0.5)
        ss = S.construct_type2(W, seed=seed)
        assert ss.n == (d + 1) * r
        ok, rep = S.is_type2(W, ss)
        assert ok and rep.numerical_rank == (d + 1) * r


def test_constructed_prefixes_separate_weight_prefixes():
    rng = np.random.default_rng(8)
    W = distinct_weights(3, 2, rng, gap=0.5)
    ss = S.construct_type2(W, seed=0)
    for k in range(1, 4):
        assert S.is_type2(W[:k], ss.points[: 3 * k])[0]


def test_construct_rejects_equal_weights():
    W = np.array([[0.2, 0.1], [0.2, 0.1]])
    with pytest.raises(ValueError):
        S.construct_type1(W, seed=0)
    with pytest.raises(ValueError):
        S.construct_type2(W, seed=0)


def test_construct_other_activation():
    act = ActivationSpec(ActivationKind.SHIFTED_SIGMOID, shift=0.5)
    W = np.array([[-1.0], [0.5]])
    ss = S.construct_type2(W, act, seed=1)
    assert S.is_type2(W, ss, act)[0]


def test_random_samples_are_type2_almost_everywhere():
    # 1000 seeded trials, n = (d+1) r random points against r distinct weights
    fails = []
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        r = int(rng.integers(1, 5))
        W = distinct_weights(r, d, rng)
        X = rng.uniform(-1, 1, size=((d + 1) * r, d))
        ok, rep = S.is_type2(W, X)
        if not ok:
            fails.append((seed, d, r, rep.singular_values[-1] / rep.singular_values[0]))
    assert not fails, f"{len(fails)} of 1000 trials below ratio 1e-8, e.g. (seed, d, r, ratio) {fails[:5]}"


def test_perturb_zero_is_identity():
    ss = S.random_sample_set(6, 2, seed=3)
    out = S.perturb_samples(ss, 0.0, seed=1)
    np.testing.assert_array_equal(out.points, ss.points)
    assert out.provenance is S.Provenance.PERTURBED and out.base_seed == 3
    with pytest.raises(ValueError):
        S.perturb_samples(ss, -1.0)


def test_perturb_stays_in_ball():
    ss = S.random_sample_set(200, 3, seed=4)
    out = S.perturb_samples(ss, 0.01, seed=5)
    step = np.linalg.norm(out.points - ss.points, axis=1)
    assert step.max() <= 0.01 and step.min() > 0


def test_perturbation_keeps_type2():
    kept = 0
    for seed in range(1000):
        rng = np.random.default_rng([9, seed])
        d = 1 + seed % 3
        r = 1 + (seed // 3) % 3
        W = distinct_weights(r, d, rng, gap=0.5)
        ss = S.construct_type2(W, rng=rng)
        _, base = S.is_type2(W, ss)
        ok, rep = S.is_type2(W, S.perturb_samples(ss, 1e-3, rng=rng))
        kept += ok and base.margin / 10 < rep.margin < base.margin * 10
    assert kept >= 990


def test_margin_shrinks_with_weight_gap():
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, size=(4, 1))
    ratios = []
    for g in np.geomspace(1.0, 1e-3, 7):
        s = S.is_type2(np.array([[0.0], [g]]), X)[1].singular_values
        ratios.append(s[-1] / s[0])
    assert all(b < a for a, b in zip(ratios, ratios[1:]))


def test_sample_set_round_trip():
    ss = S.perturb_samples(S.random_sample_set(4, 2, seed=2), 1e-3, seed=7)
    back = S.SampleSet.from_dict(ss.to_dict())
    np.testing.assert_array_equal(back.points, ss.points)
    assert back.provenance is S.Provenance.PERTURBED and back.eps == 1e-3 and back.base_seed == 2
    assert ss.to_dict()["provenance"] == {"kind": "perturbed", "base_seed": 2, "eps": 1e-3}


@given(seed=st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_study_weights_construct_for_any_target(seed):
    rng = np.random.default_rng(seed)
    t = random_target(1, 1, rng, min_gap=0.5)
    W = np.vstack([t.bar_w, t.bar_w + 0.7])
    assert S.is_type2(W, S.construct_type2(W, rng=rng))[0]
