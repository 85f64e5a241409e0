import numpy as np
import pytest

from minima_atlas import hessian_lab as H
from minima_atlas.branches import Branch, Partition, branch_classes, sample_point
from minima_atlas.network import LossContext, TargetNetwork, hessian_gn, pack, random_target
from minima_atlas.samples import construct_type2


def setup(m, m0=1, d=1, seed=0, eps=1e-2):
    tg = random_target(m0, d, np.random.default_rng([seed, m, m0, d]), min_gap=0.5)
    return tg, H.study_samples(tg, m, seed=seed, eps=eps)


def test_single_neuron_is_morse_bott_with_explicit_eigenvalues():
    tg = TargetNetwork(np.array([1.0]), np.array([[0.5]]))
    X = construct_type2(tg.bar_w, seed=0).points
    ctx = LossContext(tg, X)
    b = Branch(Partition((0, 1)), (0,), 1, 1)
    rep = H.analyze_point(tg.theta, b, ctx)
    assert rep.rank == 2 == rep.codim and rep.morse_bott
    # hand-built 2x2 Gauss-Newton matrix: h_i = (e^{w x_i}, a x_i e^{w x_i})
    h = np.column_stack([np.exp(0.5 * X[:, 0]), X[:, 0] * np.exp(0.5 * X[:, 0])])
    np.testing.assert_allclose(np.sort(rep.singular_values[:2]), np.sort(np.linalg.eigvalsh(2 * h.T @ h)),
                               rtol=1e-12)


def test_collapsed_branch_never_morse_bott():
    tg, ss = setup(2)
    b = Branch(Partition((0, 2)), (0, 1), 1, 1)
    assert H.rank_bounds(b) == (1, 2) and b.codim == 3
    rng = np.random.default_rng(1)
    for n in (3, 4):
        ctx = LossContext(tg, ss.points[:n])
        for _ in range(20):
            rep = H.analyze_point(sample_point(b, tg, rng), b, ctx)
            assert rep.rank == 2 and not rep.morse_bott and rep.bounds_hold
            assert not H.predicted_morse_bott(b, n)


def test_deficient_branch_is_morse_bott_from_codim():
    tg, ss = setup(2)
    b = Branch(Partition((0, 1, 2)), (0, 1), 1, 1)
    rng = np.random.default_rng(2)
    for n in (3, 4):
        ctx = LossContext(tg, ss.points[:n])
        for _ in range(100):
            rep = H.analyze_point(sample_point(b, tg, rng), b, ctx)
            assert rep.rank == 3 and rep.morse_bott and rep.generic
            assert H.predicted_morse_bott(b, n)


def test_rank_equals_n_below_the_upper_bound():
    for m, m0, d in [(2, 1, 1), (3, 1, 1), (3, 2, 2), (4, 1, 2)]:
        tg, ss = setup(m, m0, d)
        rng = np.random.default_rng(3)
        for b in branch_classes(m, m0, d):
            _, upper = H.rank_bounds(b)
            for n in range(b.r, min(upper, ss.n) + 1):
                chk = H.rank_equals_n_check(b, LossContext(tg, ss.points[:n]), rng)
                assert chk and chk.generic
    with pytest.raises(ValueError):
        H.rank_equals_n_check(Branch(Partition((0, 2)), (0, 1), 1, 1), LossContext(tg, ss.points[:4]))


def test_single_sample_rank_one():
    tg, ss = setup(3)
    ctx = LossContext(tg, ss.points[:1])
    for b in branch_classes(3, 1, 1):
        assert H.rank_equals_n_check(b, ctx).rank == 1


def test_split_outer_weight_is_flagged_non_generic():
    tg, ss = setup(3)
    b = Branch(Partition((0, 1, 3)), (0, 1, 2), 1, 1)
    u = tg.bar_w[0, 0] + 1.0
    theta = pack([tg.bar_a[0], 0.0, 0.0], [[tg.bar_w[0, 0]], [u], [u]])
    # zero outer weights on the non-target block kill its inner-weight column
    ctx = LossContext(tg, ss.points[:4])
    chk = H.rank_equals_n_check(b, ctx, theta=theta)
    assert not chk.generic and chk.rank == 3 and not chk


def test_gn_spectrum_matches_eigvalsh_route():
    tg, ss = setup(3, d=2)
    ctx = LossContext(tg, ss.points)
    rng = np.random.default_rng(4)
    for b in branch_classes(3, 1, 2):
        theta = sample_point(b, tg, rng)
        rank, lam = H.gn_spectrum(theta, ctx)
        ev = np.sort(np.linalg.eigvalsh(hessian_gn(theta, ctx)))[::-1]
        assert np.max(np.abs(lam - ev)) <= 1e-12 * ev[0]
        assert rank == b.codim if H.predicted_morse_bott(b, ctx.n) else rank <= H.rank_bounds(b)[1]


def test_analyze_point_rejects_off_branch_points():
    tg, ss = setup(2)
    ctx = LossContext(tg, ss.points)
    b = Branch(Partition((0, 1, 2)), (0, 1), 1, 1)
    other = Branch(Partition((0, 2)), (0, 1), 1, 1)
    theta = sample_point(b, tg, np.random.default_rng(5))
    with pytest.raises(H.MembershipError):
        H.analyze_point(theta, other, ctx)
    with pytest.raises(H.MembershipError):
        H.analyze_point(theta + 0.1, b, ctx)


def test_report_serialises():
    tg, ss = setup(2)
    ctx = LossContext(tg, ss.points)
    b = Branch(Partition((0, 1, 2)), (0, 1), 1, 1)
    d = H.analyze_point(sample_point(b, tg, np.random.default_rng(6)), b, ctx).to_dict()
    assert d["branch"] == {"r": 2, "q": [0, 1, 2], "pi": [0, 1]} and d["morse_bott"] is True


def test_predictions_and_turning_points():
    assert H.turning_points(2, 1, 1) == [2, 3, 4]
    assert H.turning_points(3, 1, 1) == [2, 4, 6]
    b = Branch(Partition((0, 1, 2)), (0, 1), 1, 1)
    assert [H.predicted_separation(b, n) for n in (2, 3, 4)] == [False, True, True]
    b3 = Branch(Partition((0, 1, 3)), (0, 1, 2), 1, 1)
    assert [H.predicted_separation(b3, n) for n in (2, 3, 4)] == [False, None, True]


def test_study_samples_are_type2_prefixes():
    from minima_atlas.samples import is_type2
    tg, ss = setup(3, d=2, eps=0.0)
    W = H.reference_weights(tg, 3, np.random.default_rng(0))
    assert W.shape == (3, 2) and np.array_equal(W[0], tg.bar_w[0])
    assert ss.n == 9
    again = H.study_samples(tg, 3, seed=0, eps=0.0)
    np.testing.assert_array_equal(ss.points, again.points)
    # the first (d+1) m0 points separate the target weights
    assert is_type2(tg.bar_w, ss.points[:3])[0]


def test_conditioned_point_meets_floor():
    tg, ss = setup(3)
    ctx = LossContext(tg, ss.points[:4])
    b = Branch(Partition((0, 1, 3)), (0, 1, 2), 1, 1)
    theta = H.conditioned_point(b, ctx, np.random.default_rng(7))
    rank, lam = H.gn_spectrum(theta, ctx)
    assert lam[rank - 1] >= H.CONDITION_FLOOR
    with pytest.raises(ValueError):
        H.conditioned_point(b, ctx, np.random.default_rng(7), lam_floor=1e6, max_draws=5)


def test_classify_zero_uses_coarse_ladder_only_for_matching_functions():
    tg, ss = setup(3)
    ctx = LossContext(tg, ss.points)
    w = tg.bar_w[0, 0]
    # three copies of the target weight spread by 2e-5: function matches to ~1e-9
    theta = pack([0.4 * tg.bar_a[0], 0.3 * tg.bar_a[0], 0.3 * tg.bar_a[0]], [[w], [w + 2e-5], [w - 2e-5]])
    v, coarse = H.classify_zero(theta, ctx)
    assert coarse and v.on_branch and v.branch.r == 1
    far = pack([tg.bar_a[0], 0.5, -0.5], [[w], [w + 0.3], [w + 0.3 + 2e-5]])
    v2, coarse2 = H.classify_zero(far, ctx)
    assert not coarse2 and not v2.on_branch


def test_sweep_rows_are_deterministic():
    tg, ss = setup(2)
    factory = lambda n: LossContext(tg, ss.points[:n])
    rows = H.threshold_sweep(2, 1, 1, [2, 3, 4], factory, seeds=(0, 1))
    assert rows == H.threshold_sweep(2, 1, 1, [2, 3, 4], factory, seeds=(0, 1))
    assert len(rows) == 3 * 2 * 2
    assert set(rows[0]) == set(H.SWEEP_COLUMNS)
    mb = {(r["n"], r["P"]): r["morse_bott"] for r in rows}
    assert mb[(3, "(0,1,2)")] and mb[(4, "(0,1,2)")] and not mb[(2, "(0,1,2)")]
    assert not any(v for (n, P), v in mb.items() if P == "(0,2)")


def test_separation_probe_small_cell():
    tg, ss = setup(2)
    b = Branch(Partition((0, 1, 2)), (0, 1), 1, 1)
    rep = H.separation_probe(b, LossContext(tg, ss.points[:4]), trials=5, rng=np.random.default_rng(8))
    assert rep.separated and rep.on_branch == rep.zeros == 5
    rep2 = H.separation_probe(b, LossContext(tg, ss.points[:2]), trials=5, rng=np.random.default_rng(8))
    assert not rep2.separated and rep2.witness_class is H.WitnessClass.OFF_QSTAR
    assert rep2.witness_residual > H.FUNCTION_TOL
    assert set(rep2.to_dict()) >= {"separated", "witness", "witness_class"}
    with pytest.raises(ValueError):
        H.separation_probe(b, LossContext(tg, ss.points[:2]), radius=0.0)


def test_isolated_minimum_examples():
    for m0 in (1, 2):
        tg = random_target(m0, 1, np.random.default_rng([8, m0, 0]), min_gap=0.5)
        ctx = LossContext(tg, construct_type2(tg.bar_w, seed=0).points)
        rep = H.isolated_minimum_check(tg, ctx, trials=10)
        assert rep and rep.worst_distance < 1e-6
    with pytest.raises(ValueError):
        H.isolated_minimum_check(tg, ctx, center=np.zeros(6))
